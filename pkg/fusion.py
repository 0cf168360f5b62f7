"""
Overlap-tile fusion: per-tile Soft-NMS, target-area retention, global assembly,
and label-map compositing
"""
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from joblib import Parallel, delayed

from errors import FusionError
from instances import (
    Detection,
    GlobalInstance,
    InstanceSet,
    bbox_iou_matrix,
    rle_encode,
    rle_patch,
    with_score,
)
from raster import RasterImage, save_raster
from tiling import Rect, Tile, TileGrid

logger = logging.getLogger(__name__)

MAX_LABEL = np.iinfo(np.uint16).max


class SoftNmsMethod(Enum):
    LINEAR = "linear"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class SoftNmsParams:
    method: SoftNmsMethod = SoftNmsMethod.GAUSSIAN
    iou_threshold: float = 0.3
    sigma: float = 0.5
    score_floor: float = 0.001

    def __post_init__(self):
        if not isinstance(self.method, SoftNmsMethod):
            raise FusionError(f"Unknown Soft-NMS method {self.method!r}")
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise FusionError(f"iou_threshold must be in [0, 1], got {self.iou_threshold}")
        if not self.sigma > 0:
            raise FusionError(f"sigma must be > 0, got {self.sigma}")
        if not 0.0 <= self.score_floor <= 1.0:
            raise FusionError(f"score_floor must be in [0, 1], got {self.score_floor}")


class FusionStrategy(Enum):
    TARGET_AREA = "target-area"
    KEEP_ALL = "keep-all"


@dataclass(frozen=True, eq=False)
class LabelMap:
    labels: np.ndarray

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def counts(self) -> Dict[int, int]:
        ids, n = np.unique(self.labels[self.labels > 0], return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, n)}

    def to_raster(self) -> RasterImage:
        top = int(self.labels.max()) if self.labels.size else 0
        if top > MAX_LABEL:
            raise FusionError(f"Label map holds {top} instances; the 16-bit container stops at {MAX_LABEL}")
        return RasterImage(self.labels.astype(np.uint16), bit_depth=16, band_names=("instance_id",))


def _soft_nms_single(dets: List[Detection], order: List[int], params: SoftNmsParams) -> List[tuple]:
    """Soft-NMS over one category; returns (final score, input position, det)"""
    boxes = np.array([d.bbox for d in dets], dtype=np.float64)
    ious = bbox_iou_matrix(boxes)
    scores = np.array([d.score for d in dets], dtype=np.float64)
    remaining = list(range(len(dets)))
    while remaining:
        # highest score, earliest input position on ties
        best = max(remaining, key=lambda i: (scores[i], -order[i]))
        remaining.remove(best)
        if not remaining:
            break
        rest = np.array(remaining)
        overlap = ious[best, rest]
        if params.method is SoftNmsMethod.LINEAR:
            decay = np.where(overlap > params.iou_threshold, 1.0 - overlap, 1.0)
        else:
            decay = np.exp(-(overlap ** 2) / params.sigma)
        scores[rest] *= decay
    return [(scores[i], order[i], dets[i]) for i in range(len(dets))]


def soft_nms(dets: Sequence[Detection], params: SoftNmsParams) -> List[Detection]:
    """Decay overlapping scores instead of deleting boxes; one category at a time"""
    by_category: Dict[int, List[int]] = {}
    for i, det in enumerate(dets):
        by_category.setdefault(det.category, []).append(i)

    results = []
    for positions in by_category.values():
        results.extend(_soft_nms_single([dets[i] for i in positions], positions, params))

    kept = [r for r in results if r[0] >= params.score_floor]
    kept.sort(key=lambda r: (-r[0], r[1]))
    return [with_score(det, score) for score, _, det in kept]


def filter_by_target_area(dets: Sequence[Detection], target: Rect) -> List[Detection]:
    """Keep detections whose box top-left corner lies in the half-open target"""
    return [d for d in dets if target.contains(d.bbox[0], d.bbox[1])]


def translate_to_global(det: Detection, tile: Tile, instance_id: int = 1) -> GlobalInstance:
    x, y, w, h = det.bbox
    tight = det.mask.foreground_bbox()
    if tight is None:
        raise FusionError(f"Detection in tile '{tile.tile_id}' has an empty mask")
    fx, fy, fw, fh = tight
    local = rle_encode(rle_patch(det.mask, fx, fy, fw, fh))
    return GlobalInstance(
        instance_id=instance_id,
        bbox=(x + tile.origin_x, y + tile.origin_y, w, h),
        score=det.score,
        category=det.category,
        mask=local,
        frame_x=tile.origin_x + fx,
        frame_y=tile.origin_y + fy,
    )


def _fuse_tile(tile: Tile, dets: Sequence[Detection], nms: Optional[SoftNmsParams],
               strategy: FusionStrategy) -> List[GlobalInstance]:
    if nms is not None:
        dets = soft_nms(dets, nms)
    if strategy is FusionStrategy.TARGET_AREA:
        dets = filter_by_target_area(dets, tile.target)
    return [translate_to_global(d, tile) for d in dets]


def fuse(per_tile_dets: Mapping[str, Sequence[Detection]], grid: TileGrid,
         nms: Optional[SoftNmsParams] = None,
         strategy: FusionStrategy = FusionStrategy.TARGET_AREA,
         threads: int = 1) -> InstanceSet:
    """Assemble tile detections into one duplicate-free, whole-image instance set"""
    unknown = [tid for tid in per_tile_dets if grid.tile(tid) is None]
    if unknown:
        raise FusionError(f"Detections reference unknown tile '{unknown[0]}'")

    per_tile = Parallel(n_jobs=threads, backend="threading")(
        delayed(_fuse_tile)(tile, per_tile_dets.get(tile.tile_id, ()), nms, strategy)
        for tile in grid.tiles
    )

    instances = []
    next_id = 1
    for tile_instances in per_tile:
        for inst in tile_instances:
            instances.append(GlobalInstance(
                instance_id=next_id,
                bbox=inst.bbox,
                score=inst.score,
                category=inst.category,
                mask=inst.mask,
                frame_x=inst.frame_x,
                frame_y=inst.frame_y,
            ))
            next_id += 1

    n_in = sum(len(v) for v in per_tile_dets.values())
    logger.info("Fused %d tile detections into %d instances (%s)", n_in, len(instances), strategy.value)
    return InstanceSet(grid.image_id, grid.image_width, grid.image_height, tuple(instances))


def _paint_order(instances: Sequence[GlobalInstance]) -> List[GlobalInstance]:
    return sorted(instances, key=lambda inst: (inst.score, inst.instance_id))


def render_label_map(instance_set: InstanceSet) -> LabelMap:
    """Paint ids in ascending score order; later (higher-score) ids win contested pixels"""
    labels = np.zeros((instance_set.height, instance_set.width), dtype=np.uint32)
    for inst in _paint_order(instance_set.instances):
        local = inst.mask.indices()
        cols = local // inst.mask.height + inst.frame_x
        rows = local % inst.mask.height + inst.frame_y
        labels[rows, cols] = inst.instance_id
    return LabelMap(labels)


def render_foreground(instance_set: InstanceSet) -> np.ndarray:
    """Union of all instance masks as a boolean (height, width) grid"""
    fg = np.zeros((instance_set.height, instance_set.width), dtype=bool)
    for inst in instance_set.instances:
        local = inst.mask.indices()
        fg[local % inst.mask.height + inst.frame_y, local // inst.mask.height + inst.frame_x] = True
    return fg


def save_label_map(label_map: LabelMap, path: Union[str, Path]) -> None:
    path = Path(path)
    if path.suffix.lower() != ".bsq":
        raise FusionError(f"Label maps are written as 16-bit planar .bsq files, got '{path.name}'")
    save_raster(label_map.to_raster(), path)
