"""
Seeded synthetic field scenes and a simulated per-tile detector
"""
import json
import logging
import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from skimage.draw import polygon

from errors import ConfigError, PlacementError
from instances import Detection, GlobalInstance, InstanceSet, crop_instance, rle_encode, rle_from_patch
from raster import BAND_ORDER, RasterImage, load_raster, save_raster
from store import load_annotations, save_annotations
from tiling import Tile, TileGrid

logger = logging.getLogger(__name__)

# blue, green, red
BACKGROUND = (38, 58, 46)
FIELD_CATEGORY = 1


class ShapeKind(Enum):
    RECTANGLE = "rectangle"
    CONVEX_POLYGON = "convex-polygon"


@dataclass(frozen=True)
class SceneConfig:
    width: int = 5000
    height: int = 5000
    n_objects: int = 300
    size_range: Tuple[int, int] = (40, 220)
    shape: ShapeKind = ShapeKind.RECTANGLE
    min_gap: int = 0
    seed: int = 0
    max_attempts: int = 10_000

    def __post_init__(self):
        lo, hi = self.size_range
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"Scene must be at least 1x1, got {self.width}x{self.height}")
        if self.n_objects < 0:
            raise ConfigError(f"n_objects must be >= 0, got {self.n_objects}")
        if not 1 <= lo <= hi:
            raise ConfigError(f"size_range must satisfy 1 <= min <= max, got {self.size_range}")
        if hi > min(self.width, self.height):
            raise ConfigError(f"Largest side {hi} exceeds the {self.width}x{self.height} scene")
        if self.min_gap < 0:
            raise ConfigError(f"min_gap must be >= 0, got {self.min_gap}")
        if not isinstance(self.shape, ShapeKind):
            raise ConfigError(f"Unknown shape {self.shape!r}")


@dataclass(frozen=True)
class NoiseConfig:
    p_drop: float = 0.0
    bbox_jitter: int = 0
    score_law: Optional[Tuple[float, float]] = None
    p_spurious: float = 0.0
    seed: int = 0
    spurious_size: Tuple[int, int] = (16, 64)
    spurious_score_law: Tuple[float, float] = (1.5, 5.0)

    def __post_init__(self):
        if not 0.0 <= self.p_drop <= 1.0:
            raise ConfigError(f"p_drop must be in [0, 1], got {self.p_drop}")
        if self.bbox_jitter < 0:
            raise ConfigError(f"bbox_jitter must be >= 0, got {self.bbox_jitter}")
        if self.p_spurious < 0:
            raise ConfigError(f"p_spurious must be >= 0, got {self.p_spurious}")
        for name, law in (("score_law", self.score_law), ("spurious_score_law", self.spurious_score_law)):
            if law is not None and (len(law) != 2 or min(law) <= 0):
                raise ConfigError(f"{name} needs two positive Beta parameters, got {law}")
        lo, hi = self.spurious_size
        if not 1 <= lo <= hi:
            raise ConfigError(f"spurious_size must satisfy 1 <= min <= max, got {self.spurious_size}")

    @classmethod
    def perfect(cls, seed: int = 0) -> "NoiseConfig":
        return cls(seed=seed)

    @property
    def is_perfect(self) -> bool:
        return (self.p_drop == 0 and self.bbox_jitter == 0
                and self.score_law is None and self.p_spurious == 0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NoiseConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"Noise settings must be a JSON object, got {type(data).__name__}")
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown noise setting(s): {sorted(unknown)}")
        values = dict(data)
        try:
            for key in ("score_law", "spurious_score_law", "spurious_size"):
                if values.get(key) is not None:
                    values[key] = tuple(values[key])
            return cls(**values)
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Malformed noise settings {data!r}: {e}") from e

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NoiseConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"Noise file {path} is not valid JSON: {e}") from e
        return cls.from_dict(data)


def object_color(index: int) -> Tuple[int, int, int]:
    """Distinct (blue, green, red) triple per object index"""
    return 150, 64 + (index // 192) % 192, 64 + (index * 37) % 192


def _shape_mask(kind: ShapeKind, w: int, h: int, rng: np.random.Generator) -> np.ndarray:
    if kind is ShapeKind.RECTANGLE:
        return np.ones((h, w), dtype=bool)
    # vertices on the inscribed ellipse are in convex position
    k = int(rng.integers(5, 9))
    angles = np.sort(np.concatenate((rng.uniform(0, 2 * math.pi, k), [0, math.pi / 2, math.pi, 3 * math.pi / 2])))
    cols = w / 2 + (w / 2) * np.cos(angles)
    rows = h / 2 + (h / 2) * np.sin(angles)
    mask = np.zeros((h, w), dtype=bool)
    rr, cc = polygon(rows, cols, shape=(h, w))
    mask[rr, cc] = True
    if not mask.any():
        mask[:] = True
    return mask


def generate_scene(cfg: SceneConfig, image_id: str = "scene") -> Tuple[RasterImage, InstanceSet]:
    """Non-overlapping filled fields on a flat background, with exact ground truth"""
    rng = np.random.default_rng(cfg.seed)
    lo, hi = cfg.size_range
    gap = cfg.min_gap
    placed = np.zeros((cfg.n_objects, 4), dtype=np.int64)
    pixels = np.empty((cfg.height, cfg.width, 3), dtype=np.uint8)
    pixels[:, :] = BACKGROUND
    instances = []

    for i in range(cfg.n_objects):
        for _ in range(cfg.max_attempts):
            w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            x = int(rng.integers(0, cfg.width - w + 1))
            y = int(rng.integers(0, cfg.height - h + 1))
            boxes = placed[:i]
            clash = (
                (x < boxes[:, 2] + gap) & (boxes[:, 0] < x + w + gap)
                & (y < boxes[:, 3] + gap) & (boxes[:, 1] < y + h + gap)
            )
            if not clash.any():
                break
        else:
            raise PlacementError(
                f"Could not place object {i + 1} of {cfg.n_objects} after {cfg.max_attempts} "
                f"attempts; the {cfg.width}x{cfg.height} scene is too dense"
            )
        placed[i] = (x, y, x + w, y + h)

        mask = _shape_mask(cfg.shape, w, h, rng)
        cols = np.flatnonzero(mask.any(axis=0))
        rows = np.flatnonzero(mask.any(axis=1))
        tight = mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
        fx, fy = x + int(cols[0]), y + int(rows[0])
        th, tw = tight.shape

        pixels[fy:fy + th, fx:fx + tw][tight] = object_color(i)
        instances.append(GlobalInstance(
            instance_id=i + 1,
            bbox=(fx, fy, tw, th),
            score=1.0,
            category=FIELD_CATEGORY,
            mask=rle_encode(tight),
            frame_x=fx,
            frame_y=fy,
        ))

    logger.info("Generated scene %s: %dx%d, %d objects (seed %d)",
                image_id, cfg.width, cfg.height, len(instances), cfg.seed)
    raster = RasterImage(pixels, bit_depth=8, band_names=BAND_ORDER[:3])
    return raster, InstanceSet(image_id, cfg.width, cfg.height, tuple(instances))


def tile_rng(seed: int, tile_index: int) -> np.random.Generator:
    """Independent stream per tile, so results do not depend on scheduling"""
    return np.random.default_rng(np.random.SeedSequence([seed, tile_index]))


def _visible(gt: InstanceSet, tile: Tile) -> List[GlobalInstance]:
    if not gt.instances:
        return []
    frames = np.array([inst.frame for inst in gt.instances], dtype=np.int64)
    hit = (
        (frames[:, 0] < tile.origin_x + tile.width) & (tile.origin_x < frames[:, 0] + frames[:, 2])
        & (frames[:, 1] < tile.origin_y + tile.height) & (tile.origin_y < frames[:, 1] + frames[:, 3])
    )
    return [gt.instances[i] for i in np.flatnonzero(hit)]


def simulate_detector(gt: InstanceSet, tile: Tile, noise: NoiseConfig,
                      tile_index: int = 0) -> List[Detection]:
    """What a per-tile model would report: objects clipped to the tile, plus noise"""
    rng = tile_rng(noise.seed, tile_index)
    dets = []
    for inst in _visible(gt, tile):
        if noise.p_drop > 0 and rng.random() < noise.p_drop:
            continue
        shift = (0, 0)
        if noise.bbox_jitter > 0:
            dx, dy = rng.integers(-noise.bbox_jitter, noise.bbox_jitter + 1, size=2)
            shift = (int(dx), int(dy))
        score = 1.0 if noise.score_law is None else float(rng.beta(*noise.score_law))
        det = crop_instance(inst, tile, shift=shift, score=score)
        if det is not None:
            dets.append(det)

    n_spurious = int(rng.poisson(noise.p_spurious)) if noise.p_spurious > 0 else 0
    lo, hi = noise.spurious_size
    for _ in range(n_spurious):
        w = min(int(rng.integers(lo, hi + 1)), tile.width)
        h = min(int(rng.integers(lo, hi + 1)), tile.height)
        x = int(rng.integers(0, tile.width - w + 1))
        y = int(rng.integers(0, tile.height - h + 1))
        dets.append(Detection(
            tile_id=tile.tile_id,
            bbox=(x, y, w, h),
            score=float(rng.beta(*noise.spurious_score_law)),
            category=FIELD_CATEGORY,
            mask=rle_from_patch(np.ones((h, w), dtype=bool), x, y, tile.width, tile.height),
        ))
    logger.debug("Tile %s: %d simulated detections", tile.tile_id, len(dets))
    return dets


def simulate_grid(gt: InstanceSet, grid: TileGrid, noise: NoiseConfig,
                  threads: int = 1) -> Dict[str, List[Detection]]:
    results = Parallel(n_jobs=threads, backend="threading")(
        delayed(simulate_detector)(gt, tile, noise, i) for i, tile in enumerate(grid.tiles)
    )
    return {tile.tile_id: dets for tile, dets in zip(grid.tiles, results)}


def save_scene(out_dir: Union[str, Path], raster: RasterImage, gt: InstanceSet,
               raster_format: str = "png") -> Path:
    """Write ``<image_id>.<format>`` and ``gt.json``; the file stem is the image id"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raster_path = out_dir / f"{gt.image_id}.{raster_format}"
    save_raster(raster, raster_path)
    save_annotations(out_dir / "gt.json", [gt])
    return raster_path


def load_scene_gt(scene_dir: Union[str, Path]) -> InstanceSet:
    sets = load_annotations(Path(scene_dir) / "gt.json")
    if len(sets) != 1:
        raise ConfigError(f"Scene {scene_dir} must hold exactly one image, found {len(sets)}")
    return sets[0]


def find_scene_raster(scene_dir: Union[str, Path], image_id: str) -> Optional[Path]:
    for suffix in (".png", ".bsq"):
        path = Path(scene_dir) / f"{image_id}{suffix}"
        if path.exists():
            return path
    return None


def load_scene(scene_dir: Union[str, Path]) -> Tuple[Optional[RasterImage], InstanceSet]:
    gt = load_scene_gt(scene_dir)
    raster_path = find_scene_raster(scene_dir, gt.image_id)
    raster = load_raster(raster_path) if raster_path is not None else None
    return raster, gt
