"""
Run configuration: environment defaults, JSON config files and CLI overrides
"""
import json
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from dotenv import load_dotenv

from errors import BandSelectionError, ConfigError, GridError
from fusion import FusionStrategy, SoftNmsMethod, SoftNmsParams
from metrics import ApInterpolation, MiouPooling
from raster import BandCombo
from synth import NoiseConfig, SceneConfig, ShapeKind
from tiling import DEFAULT_MARGIN, DEFAULT_STRIDE, DEFAULT_WINDOW, GridParams

logger = logging.getLogger(__name__)

# Load environment variables
load_dotenv()


def env_optional_int(name: str) -> Optional[int]:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"Environment variable {name} must be an integer, got '{raw}'") from None


def env_int(name: str, default: int) -> int:
    value = env_optional_int(name)
    return default if value is None else value


def default_threads() -> int:
    return env_int("TILEFUSE_THREADS", os.cpu_count() or 1)


def default_log_level() -> str:
    return os.getenv("TILEFUSE_LOG_LEVEL", "WARNING").upper()


def parse_size_range(text: str) -> Tuple[int, int]:
    """'40:220' -> (40, 220)"""
    try:
        lo, hi = (int(part) for part in str(text).split(":"))
    except ValueError:
        raise ConfigError(f"Size range must look like MIN:MAX, got '{text}'") from None
    return lo, hi


def parse_ratio(text: str) -> Tuple[int, int]:
    try:
        train, val = (int(part) for part in str(text).split(":"))
    except ValueError:
        raise ConfigError(f"Split ratio must look like TRAIN:VAL, got '{text}'") from None
    return train, val


@dataclass
class PipelineConfig:
    """Every knob of a pipeline run; field metadata doubles as CLI help"""
    input: Optional[str] = field(
        default=None,
        metadata={"help": "Input raster (.png or .bsq); omit to run on a generated synthetic scene"},
    )
    dets: Optional[str] = field(
        default=None,
        metadata={"help": "Per-tile detections JSONL (required with --input)"},
    )
    gt: Optional[str] = field(
        default=None,
        metadata={"help": "Ground-truth annotation file; enables the eval stage for real inputs"},
    )
    out: str = field(default="run", metadata={"help": "Output directory"})
    window: int = field(
        default_factory=lambda: env_int("TILEFUSE_WINDOW", DEFAULT_WINDOW),
        metadata={"help": "Tile size W in pixels"},
    )
    stride: int = field(
        default_factory=lambda: env_int("TILEFUSE_STRIDE", DEFAULT_STRIDE),
        metadata={"help": "Sliding-window stride S in pixels"},
    )
    margin: int = field(
        default_factory=lambda: env_int("TILEFUSE_MARGIN", DEFAULT_MARGIN),
        metadata={"help": "Ignore margin m in pixels, 0 <= m <= W - S"},
    )
    bands: str = field(default="rgb", metadata={"help": "Band combination: rgb, nirgb or an index list like 3,1,0"})
    export_tiles: bool = field(default=False, metadata={"help": "Also write tile rasters under OUT/tiles"})
    soft_nms: Optional[str] = field(
        default=None,
        metadata={"help": "Per-tile Soft-NMS before fusion: linear or gaussian (off by default)"},
    )
    nms_iou: float = field(default=0.3, metadata={"help": "Soft-NMS linear IoU threshold"})
    sigma: float = field(default=0.5, metadata={"help": "Soft-NMS Gaussian sigma"})
    score_floor: float = field(default=0.001, metadata={"help": "Drop detections whose decayed score falls below this"})
    strategy: str = field(default="target-area", metadata={"help": "Fusion strategy: target-area or keep-all"})
    labelmap: bool = field(default=False, metadata={"help": "Write a 16-bit instance label map (labelmap.bsq)"})
    threads: int = field(default_factory=default_threads, metadata={"help": "Worker threads"})
    seed: Optional[int] = field(
        default_factory=lambda: env_optional_int("TILEFUSE_SEED"),
        metadata={"help": "Seed for synthetic scenes and the simulated detector (overrides the noise file seed)"},
    )
    noise: Optional[str] = field(
        default=None,
        metadata={"help": "NoiseConfig JSON for the simulated detector (default: perfect detector)"},
    )
    scene_width: int = field(default=5000, metadata={"help": "Synthetic scene width"})
    scene_height: int = field(default=5000, metadata={"help": "Synthetic scene height"})
    objects: int = field(default=300, metadata={"help": "Synthetic object count"})
    sizes: str = field(default="40:220", metadata={"help": "Synthetic object side range MIN:MAX"})
    shape: str = field(default="rectangle", metadata={"help": "Synthetic object shape: rectangle or convex-polygon"})
    min_gap: int = field(default=0, metadata={"help": "Minimum pixel gap between synthetic objects"})
    ap_interp: str = field(default="allpoints", metadata={"help": "AP interpolation: allpoints or coco101"})
    miou_pooling: str = field(default="pooled", metadata={"help": "mIoU aggregation: pooled or per-image"})
    strict_iou: bool = field(default=False, metadata={"help": "Count a match only when IoU > 0.5"})
    score_eff: Optional[float] = field(default=None, metadata={"help": "Judge efficiency subscore (enables Score2)"})
    score_cod: Optional[float] = field(default=None, metadata={"help": "Judge code subscore (enables Score2)"})
    score_doc: Optional[float] = field(default=None, metadata={"help": "Judge documentation subscore (enables Score2)"})

    @property
    def synthetic(self) -> bool:
        return self.input is None

    def grid_params(self) -> GridParams:
        try:
            return GridParams(self.window, self.stride, self.margin)
        except GridError as e:
            raise ConfigError(str(e)) from e

    def band_combo(self) -> BandCombo:
        try:
            return BandCombo.from_name(self.bands)
        except BandSelectionError as e:
            raise ConfigError(str(e)) from e

    def nms_params(self) -> Optional[SoftNmsParams]:
        if self.soft_nms is None:
            return None
        try:
            return SoftNmsParams(SoftNmsMethod(self.soft_nms), self.nms_iou, self.sigma, self.score_floor)
        except ValueError as e:
            raise ConfigError(f"Invalid Soft-NMS settings: {e}") from e

    def fusion_strategy(self) -> FusionStrategy:
        return _enum(FusionStrategy, self.strategy, "strategy")

    def interpolation(self) -> ApInterpolation:
        return _enum(ApInterpolation, self.ap_interp, "ap_interp")

    def pooling(self) -> MiouPooling:
        return _enum(MiouPooling, self.miou_pooling, "miou_pooling")

    def scene_config(self) -> SceneConfig:
        return SceneConfig(
            width=self.scene_width,
            height=self.scene_height,
            n_objects=self.objects,
            size_range=parse_size_range(self.sizes),
            shape=_enum(ShapeKind, self.shape, "shape"),
            min_gap=self.min_gap,
            seed=self.run_seed,
        )

    @property
    def run_seed(self) -> int:
        return 0 if self.seed is None else self.seed

    def noise_config(self) -> NoiseConfig:
        if self.noise is None:
            return NoiseConfig.perfect(self.run_seed)
        noise = NoiseConfig.load(self.noise)
        if self.seed is not None:
            noise = NoiseConfig.from_dict({**noise.to_dict(), "seed": self.seed})
        return noise

    def subscores(self) -> Optional[Dict[str, float]]:
        given = {"eff": self.score_eff, "cod": self.score_cod, "doc": self.score_doc}
        if all(v is None for v in given.values()):
            return None
        missing = [k for k, v in given.items() if v is None]
        if missing:
            raise ConfigError(f"Score2 needs all three subscores; missing: {', '.join(missing)}")
        return given

    def validate(self) -> None:
        self.grid_params()
        self.band_combo()
        self.nms_params()
        self.fusion_strategy()
        self.interpolation()
        self.pooling()
        self.subscores()
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.synthetic:
            self.scene_config()
        elif self.dets is None:
            raise ConfigError("--dets is required when --input is given")
        for name in ("input", "dets", "gt", "noise"):
            value = getattr(self, name)
            if value is not None and not Path(value).exists():
                raise ConfigError(f"{name} path does not exist: {value}")
        if self.synthetic and self.noise is not None:
            self.noise_config()

    def to_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _enum(kind, value: str, name: str):
    try:
        return kind(value)
    except ValueError:
        allowed = ", ".join(member.value for member in kind)
        raise ConfigError(f"{name} must be one of {allowed}; got '{value}'") from None


def help_for(name: str) -> str:
    for f in fields(PipelineConfig):
        if f.name == name:
            return f.metadata.get("help", "")
    raise KeyError(name)


def load_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Read a JSON config file; every key must be a PipelineConfig field"""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a JSON object")
    known = {f.name for f in fields(PipelineConfig)}
    for key in data:
        if key not in known:
            raise ConfigError(f"Unknown config key '{key}' in {path}")
    return data


def build_pipeline_config(overrides: Dict[str, Any], config_path: Optional[str] = None) -> PipelineConfig:
    """Flags (non-None overrides) beat the config file, which beats env and defaults"""
    values: Dict[str, Any] = {}
    if config_path:
        values.update(load_config_file(config_path))
        logger.info("Loaded config file %s", config_path)
    known = {f.name for f in fields(PipelineConfig)}
    for key, value in overrides.items():
        if key in known and value is not None:
            values[key] = value
    return PipelineConfig(**values)
