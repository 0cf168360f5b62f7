import pandas as pd

from benchmark import compare_strategies, fusion_gain, save_chart, save_table, stride_sweep
from synth import NoiseConfig, SceneConfig
from tiling import GridParams

SCENE = SceneConfig(width=500, height=400, n_objects=20, size_range=(10, 40))


def test_compare_strategies_rows():
    df = compare_strategies([0, 1], SCENE, NoiseConfig.perfect(), GridParams(200, 150, 2))
    assert len(df) == 4
    assert set(df["strategy"]) == {"target-area", "keep-all"}
    fused = df[df["strategy"] == "target-area"]
    assert (fused["score1"] == 100.0).all()
    assert (fused["instances"] == 20).all()


def test_fusion_gain_is_fused_minus_baseline():
    df = pd.DataFrame([
        {"seed": 0, "strategy": "target-area", "score1": 90.0},
        {"seed": 0, "strategy": "keep-all", "score1": 80.0},
        {"seed": 1, "strategy": "target-area", "score1": 70.0},
        {"seed": 1, "strategy": "keep-all", "score1": 72.5},
    ])
    gain = fusion_gain(df)
    assert gain["gain"].tolist() == [10.0, -2.5]


def test_stride_sweep_tile_counts():
    df = stride_sweep([200, 100], SCENE, NoiseConfig.perfect(), window=200, margin=2)
    assert df["stride"].tolist() == [200, 100]
    assert df["margin"].tolist() == [0, 2]
    assert df["tiles"].tolist() == [6, 12]


def test_outputs_written(tmp_path):
    df = stride_sweep([150], SCENE, NoiseConfig.perfect(), window=200, margin=2)
    save_table(df, tmp_path / "sweep.csv")
    save_chart(df, tmp_path / "sweep.html")
    assert pd.read_csv(tmp_path / "sweep.csv")["tiles"].tolist() == df["tiles"].tolist()
    assert "plotly" in (tmp_path / "sweep.html").read_text().lower()
