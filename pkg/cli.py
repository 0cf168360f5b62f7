#!/usr/bin/env python3
"""
Command-line front-end for tiling, simulated detection, fusion and scoring
"""
import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import List, Optional, get_args

from benchmark import compare_strategies, fusion_gain, save_chart, save_table, stride_sweep
from config import (
    PipelineConfig,
    build_pipeline_config,
    default_log_level,
    default_threads,
    env_int,
    env_optional_int,
    help_for,
    parse_ratio,
    parse_size_range,
)
from errors import ConfigError, GridError, TileFuseError
from fusion import FusionStrategy, SoftNmsMethod, SoftNmsParams, fuse, render_label_map, save_label_map
from instances import parse_detections, write_detections
from metrics import ApInterpolation, MiouPooling, evaluate
from pipeline import run_pipeline
from raster import BandCombo, load_raster, select_bands
from store import find_image, load_annotations, load_manifest, save_annotations, save_manifest, save_report
from synth import (
    NoiseConfig,
    SceneConfig,
    ShapeKind,
    generate_scene,
    load_scene_gt,
    save_scene,
    simulate_grid,
)
from tiling import (
    DEFAULT_MARGIN,
    DEFAULT_STRIDE,
    DEFAULT_WINDOW,
    GridParams,
    compute_tile_grid,
    export_dataset,
    split_dataset,
)

logger = logging.getLogger(__name__)


def configure_logging(verbosity: int = 0) -> None:
    if verbosity >= 2:
        level = logging.DEBUG
    elif verbosity == 1:
        level = logging.INFO
    else:
        level = getattr(logging, default_log_level(), logging.WARNING)
    logging.basicConfig(level=level, format="%(asctime)s - %(levelname)s - %(name)s - %(message)s")


def _threads(args) -> int:
    return args.threads if args.threads is not None else default_threads()


def _seed(args) -> int:
    return args.seed if args.seed is not None else env_int("TILEFUSE_SEED", 0)


def _grid_params(args) -> GridParams:
    return GridParams(
        args.window if args.window is not None else env_int("TILEFUSE_WINDOW", DEFAULT_WINDOW),
        args.stride if args.stride is not None else env_int("TILEFUSE_STRIDE", DEFAULT_STRIDE),
        args.margin if args.margin is not None else env_int("TILEFUSE_MARGIN", DEFAULT_MARGIN),
    )


def _nms_params(args) -> Optional[SoftNmsParams]:
    if args.soft_nms is None:
        return None
    return SoftNmsParams(SoftNmsMethod(args.soft_nms), args.nms_iou, args.sigma, args.score_floor)


def _noise(args) -> NoiseConfig:
    if args.noise is None:
        return NoiseConfig.perfect(_seed(args))
    noise = NoiseConfig.load(args.noise)
    seed = args.seed if args.seed is not None else env_optional_int("TILEFUSE_SEED")
    if seed is not None:
        noise = NoiseConfig.from_dict({**noise.to_dict(), "seed": seed})
    return noise


def cmd_tile(args) -> None:
    """Split a raster into tiles with a manifest"""
    raster = load_raster(args.input)
    image_id = Path(args.input).stem
    grid = compute_tile_grid(raster.width, raster.height, _grid_params(args), image_id)
    out = Path(args.out)

    if args.manifest_only:
        out.mkdir(parents=True, exist_ok=True)
        save_manifest(grid, out / "tiles.json")
        manifest = grid.to_manifest()
    else:
        gt = find_image(load_annotations(args.gt), image_id) if args.gt else None
        manifest = export_dataset(
            select_bands(raster, BandCombo.from_name(args.bands)), grid, out,
            keep_empty=args.keep_empty, gt=gt, threads=_threads(args),
        )

    print(f"\n✓ Tiled {raster.width}x{raster.height} image into {len(manifest['tiles'])} tiles")
    print(f"Manifest: {out / 'tiles.json'}")

    if args.split:
        train, val = split_dataset([t["tile_id"] for t in manifest["tiles"]], *parse_ratio(args.split),
                                   seed=_seed(args))
        (out / "split.json").write_text(json.dumps({"train": train, "val": val}, indent=2) + "\n")
        print(f"Split: {len(train)} train / {len(val)} val")


def cmd_detect_sim(args) -> None:
    """Run the simulated detector over every manifest tile"""
    gt = load_scene_gt(args.scene)
    grid = load_manifest(args.manifest)
    if (grid.image_width, grid.image_height) != (gt.width, gt.height):
        raise GridError(
            f"Manifest is for {grid.image_width}x{grid.image_height}, scene is {gt.width}x{gt.height}"
        )
    per_tile = simulate_grid(gt, grid, _noise(args), _threads(args))
    n = write_detections(args.out, per_tile)
    print(f"\n✓ Simulated {n} detections over {len(grid)} tiles")
    print(f"Detections: {args.out}")


def cmd_fuse(args) -> None:
    """Fuse per-tile detections into whole-image instances"""
    grid = load_manifest(args.manifest)
    per_tile = parse_detections(args.dets, grid)
    fused = fuse(per_tile, grid, nms=_nms_params(args), strategy=FusionStrategy(args.strategy),
                 threads=_threads(args))
    save_annotations(args.out, [fused])
    print(f"\n✓ Fused {sum(len(d) for d in per_tile.values())} detections into {len(fused)} instances")
    print(f"Annotations: {args.out}")
    if args.labelmap:
        save_label_map(render_label_map(fused), args.labelmap)
        print(f"Label map: {args.labelmap}")


def _subscores(args) -> Optional[dict]:
    given = {"eff": args.score_eff, "cod": args.score_cod, "doc": args.score_doc}
    if all(v is None for v in given.values()):
        return None
    missing = [k for k, v in given.items() if v is None]
    if missing:
        raise ConfigError(f"Score2 needs all three subscores; missing: {', '.join(missing)}")
    return given


def _print_report(report) -> None:
    print(f"AP50:   {report.ap50:.3f}  (TP {report.tp} / FP {report.fp} / FN {report.fn})")
    print(f"mIoU:   {report.miou:.3f}  (fg {100 * report.iou_fg:.3f} / bg {100 * report.iou_bg:.3f})")
    print(f"Score1: {report.score1:.3f}")
    if report.score2 is not None:
        print(f"Score2: {report.score2:.3f}")


def cmd_eval(args) -> None:
    """Score predicted annotations against ground truth"""
    report = evaluate(
        load_annotations(args.gt),
        load_annotations(args.pred),
        strict=args.strict_iou,
        interpolation=ApInterpolation(args.ap_interp),
        pooling=MiouPooling(args.miou_pooling),
        subscores=_subscores(args),
        threads=_threads(args),
    )
    print("\n=== EVALUATION ===")
    _print_report(report)
    if args.report:
        save_report(args.report, report.to_dict())
        print(f"Report: {args.report}")


def cmd_synth(args) -> None:
    """Generate a seeded synthetic scene with exact ground truth"""
    cfg = SceneConfig(
        width=args.width,
        height=args.height,
        n_objects=args.objects,
        size_range=parse_size_range(args.sizes),
        shape=ShapeKind(args.shape),
        min_gap=args.min_gap,
        seed=_seed(args),
    )
    raster, gt = generate_scene(cfg, args.image_id)
    raster_path = save_scene(args.out, raster, gt, args.format)
    print(f"\n✓ Scene with {len(gt)} objects written")
    print(f"Raster: {raster_path}")
    print(f"Ground truth: {Path(args.out) / 'gt.json'}")


def cmd_pipeline(args) -> None:
    """Tile, detect, fuse and score in one run"""
    overrides = {f.name: getattr(args, f.name, None) for f in fields(PipelineConfig)}
    cfg = build_pipeline_config(overrides, args.config)
    result = run_pipeline(cfg)
    print("\n=== PIPELINE COMPLETE ===")
    print(f"Tiles: {result.tiles}")
    print(f"Instances: {len(result.fused)}")
    if result.report is not None:
        _print_report(result.report)
    stages = ", ".join(f"{name} {ms:.0f} ms" for name, ms in result.timings_ms.items())
    print(f"Timings: {stages} (total {result.total_ms:.0f} ms)")
    print(f"Report: {result.outputs['report']}")


def cmd_benchmark(args) -> None:
    """Strategy comparison or stride sweep over synthetic scenes"""
    scene = SceneConfig(
        width=args.width,
        height=args.height,
        n_objects=args.objects,
        size_range=parse_size_range(args.sizes),
        seed=_seed(args),
    )
    noise = _noise(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.mode == "compare":
        seeds = range(_seed(args), _seed(args) + args.scenes)
        df = compare_strategies(seeds, scene, noise, _grid_params(args), threads=_threads(args))
        summary = fusion_gain(df)
    else:
        strides = [int(s) for s in args.strides.split(",")]
        window = args.window if args.window is not None else env_int("TILEFUSE_WINDOW", DEFAULT_WINDOW)
        margin = args.margin if args.margin is not None else env_int("TILEFUSE_MARGIN", DEFAULT_MARGIN)
        df = stride_sweep(strides, scene, noise, window, margin, _threads(args))
        summary = df

    save_table(df, out / "benchmark.csv")
    print(f"\n=== BENCHMARK ({args.mode}) ===")
    print(summary.to_string(index=False))
    print(f"\nTable: {out / 'benchmark.csv'}")
    if args.html:
        save_chart(df, out / "benchmark.html")
        print(f"Chart: {out / 'benchmark.html'}")


def _common(parser: argparse.ArgumentParser, out_help: Optional[str], out_default: Optional[str] = None) -> None:
    parser.add_argument("--threads", type=int, default=None, help="Worker threads (default: cpu count)")
    parser.add_argument("--seed", type=int, default=None, help="Random seed")
    if out_help is not None:
        parser.add_argument("--out", default=out_default, required=out_default is None, help=out_help)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")


def _grid_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--window", type=int, default=None, help=help_for("window"))
    parser.add_argument("--stride", type=int, default=None, help=help_for("stride"))
    parser.add_argument("--margin", type=int, default=None, help=help_for("margin"))


def _nms_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--soft-nms", choices=[m.value for m in SoftNmsMethod], default=None,
                        help=help_for("soft_nms"))
    parser.add_argument("--nms-iou", type=float, default=0.3, help=help_for("nms_iou"))
    parser.add_argument("--sigma", type=float, default=0.5, help=help_for("sigma"))
    parser.add_argument("--score-floor", type=float, default=0.001, help=help_for("score_floor"))


def _scene_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--width", type=int, default=5000, help="Scene width")
    parser.add_argument("--height", type=int, default=5000, help="Scene height")
    parser.add_argument("--objects", type=int, default=300, help=help_for("objects"))
    parser.add_argument("--sizes", default="40:220", help=help_for("sizes"))


def _score_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--ap-interp", choices=[m.value for m in ApInterpolation], default="allpoints",
                        help=help_for("ap_interp"))
    parser.add_argument("--miou-pooling", choices=[m.value for m in MiouPooling], default="pooled",
                        help=help_for("miou_pooling"))
    parser.add_argument("--strict-iou", action="store_true", help=help_for("strict_iou"))
    for name in ("score_eff", "score_cod", "score_doc"):
        parser.add_argument("--" + name.replace("_", "-"), type=float, default=None, help=help_for(name))


def _pipeline_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per PipelineConfig field; None means 'not given' so files and env can fill in"""
    parser.add_argument("--config", default=None, help="JSON config file; explicit flags take precedence")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    for f in fields(PipelineConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = f.type
        args = [a for a in get_args(kind) if a is not type(None)]
        if args:
            kind = args[0]
        if kind is bool:
            parser.add_argument(flag, action="store_true", default=None, help=help_for(f.name))
        else:
            parser.add_argument(flag, type=kind, default=None, help=help_for(f.name))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tilefuse",
        description="Overlap-tile fusion of per-tile instance segmentations over large rasters",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tile", help=cmd_tile.__doc__)
    p.add_argument("--input", required=True, help="Raster to split (.png or .bsq)")
    _grid_flags(p)
    p.add_argument("--bands", default="rgb", help=help_for("bands"))
    p.add_argument("--keep-empty", action="store_true", help="Keep tiles without ground truth")
    p.add_argument("--gt", default=None, help="Annotation file; writes clipped per-tile ground truth")
    p.add_argument("--split", default=None, help="Also write split.json with a TRAIN:VAL ratio, e.g. 5:1")
    p.add_argument("--manifest-only", action="store_true", help="Write tiles.json without tile rasters")
    _common(p, "Output directory")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("detect-sim", help=cmd_detect_sim.__doc__)
    p.add_argument("--scene", required=True, help="Scene directory holding gt.json")
    p.add_argument("--manifest", required=True, help="Tile manifest (tiles.json)")
    p.add_argument("--noise", default=None, help=help_for("noise"))
    _common(p, "Detections JSONL to write")
    p.set_defaults(func=cmd_detect_sim)

    p = sub.add_parser("fuse", help=cmd_fuse.__doc__)
    p.add_argument("--manifest", required=True, help="Tile manifest (tiles.json)")
    p.add_argument("--dets", required=True, help="Per-tile detections JSONL")
    _nms_flags(p)
    p.add_argument("--strategy", choices=[s.value for s in FusionStrategy], default="target-area",
                   help=help_for("strategy"))
    p.add_argument("--labelmap", default=None, help="Also write a 16-bit label map to this .bsq path")
    _common(p, "Fused annotation file to write")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help=cmd_eval.__doc__)
    p.add_argument("--gt", required=True, help="Ground-truth annotation file")
    p.add_argument("--pred", required=True, help="Predicted annotation file")
    p.add_argument("--report", default=None, help="Write the JSON report here")
    _score_flags(p)
    _common(p, None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help=cmd_synth.__doc__)
    _scene_flags(p)
    p.add_argument("--shape", choices=[s.value for s in ShapeKind], default="rectangle", help=help_for("shape"))
    p.add_argument("--min-gap", type=int, default=0, help=help_for("min_gap"))
    p.add_argument("--image-id", default="scene", help="Image id; also the raster file stem")
    p.add_argument("--format", choices=["png", "bsq"], default="png", help="Raster container")
    _common(p, "Scene directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pipeline", help=cmd_pipeline.__doc__)
    _pipeline_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("benchmark", help=cmd_benchmark.__doc__)
    p.add_argument("--mode", choices=["compare", "strides"], default="compare", help="What to measure")
    p.add_argument("--scenes", type=int, default=10, help="Scene count for --mode compare")
    p.add_argument("--strides", default="1280,1024,768,512,256", help="Comma-separated strides for --mode strides")
    _grid_flags(p)
    _scene_flags(p)
    p.add_argument("--noise", default=None, help=help_for("noise"))
    p.add_argument("--html", action="store_true", help="Also write benchmark.html")
    _common(p, "Output directory", out_default="benchmark")
    p.set_defaults(func=cmd_benchmark)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        args.func(args)
    except (TileFuseError, OSError) as e:
        # StageError messages already carry their [stage] prefix
        print(f"\n✗ Error: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
