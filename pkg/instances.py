"""
Detections and instances: run-length-encoded masks, IoU kernels, detection files

Masks use the COCO uncompressed convention: column-major scan, alternating
runs, first run is background (possibly zero-length).
"""
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DetectionFormatError, RleError

if TYPE_CHECKING:
    from tiling import Tile, TileGrid

logger = logging.getLogger(__name__)

BBox = Tuple[float, float, float, float]

# Slack allowed between a detection's box and its mask's tight box, per side
BBOX_TOLERANCE = 1.0


@dataclass(frozen=True)
class RleMask:
    width: int
    height: int
    counts: Tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "counts", counts)
        if self.width < 1 or self.height < 1:
            raise RleError(f"Mask must be at least 1x1, got {self.width}x{self.height}")
        if any(c < 0 for c in counts):
            raise RleError("RLE counts must be non-negative")
        if any(c == 0 for c in counts[1:]):
            raise RleError("RLE counts contain an interior zero run")
        total = sum(counts)
        if total != self.width * self.height:
            raise RleError(
                f"RLE counts sum to {total}, expected {self.width}x{self.height}={self.width * self.height}"
            )

    @property
    def area(self) -> int:
        return sum(self.counts[1::2])

    def indices(self) -> np.ndarray:
        """Sorted column-major linear indices of foreground pixels"""
        counts = np.asarray(self.counts, dtype=np.int64)
        ends = np.cumsum(counts)
        starts = ends - counts
        fg_starts = starts[1::2]
        fg_lengths = counts[1::2]
        total = int(fg_lengths.sum())
        if total == 0:
            return np.zeros(0, dtype=np.int64)
        # Offset of each run's first pixel within the concatenated output
        offsets = np.cumsum(fg_lengths) - fg_lengths
        return np.arange(total, dtype=np.int64) + np.repeat(fg_starts - offsets, fg_lengths)

    def foreground_bbox(self) -> Optional[Tuple[int, int, int, int]]:
        """Tight integer (x, y, w, h) around the foreground, None when empty"""
        idx = self.indices()
        if idx.size == 0:
            return None
        xs = idx // self.height
        ys = idx % self.height
        x0, x1 = int(xs.min()), int(xs.max())
        y0, y1 = int(ys.min()), int(ys.max())
        return x0, y0, x1 - x0 + 1, y1 - y0 + 1

    def to_coco(self) -> dict:
        return {"size": [self.height, self.width], "counts": list(self.counts)}

    @classmethod
    def from_coco(cls, segmentation: Mapping) -> "RleMask":
        try:
            height, width = segmentation["size"]
            counts = segmentation["counts"]
        except (KeyError, TypeError, ValueError) as e:
            raise RleError(f"Malformed segmentation: {e}") from e
        if isinstance(counts, str):
            raise RleError("Compressed RLE strings are not supported")
        return cls(int(width), int(height), tuple(counts))


def rle_encode(bitmask) -> RleMask:
    grid = np.asarray(bitmask, dtype=bool)
    if grid.ndim != 2 or grid.shape[0] < 1 or grid.shape[1] < 1:
        raise RleError(f"Cannot encode a grid of shape {grid.shape}")
    height, width = grid.shape
    pixels = grid.ravel(order="F")
    changes = np.flatnonzero(pixels[1:] != pixels[:-1]) + 1
    bounds = np.concatenate(([0], changes, [pixels.size]))
    counts = np.diff(bounds).tolist()
    if pixels[0]:
        counts.insert(0, 0)
    return RleMask(width, height, tuple(counts))


def rle_decode(mask: RleMask) -> np.ndarray:
    """Boolean (height, width) grid"""
    if sum(mask.counts) != mask.width * mask.height:
        raise RleError("RLE counts do not match the mask size")
    values = np.arange(len(mask.counts)) % 2 == 1
    pixels = np.repeat(values, mask.counts)
    return pixels.reshape((mask.height, mask.width), order="F")


def rle_from_indices(indices: np.ndarray, width: int, height: int) -> RleMask:
    """Encode sorted, unique column-major foreground indices"""
    total = width * height
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        return RleMask(width, height, (total,))
    breaks = np.flatnonzero(np.diff(idx) != 1) + 1
    starts = idx[np.concatenate(([0], breaks))]
    ends = idx[np.concatenate((breaks - 1, [idx.size - 1]))] + 1
    counts = np.empty(2 * starts.size + 1, dtype=np.int64)
    counts[0] = starts[0]
    counts[1:-1:2] = ends - starts
    counts[2:-1:2] = starts[1:] - ends[:-1]
    counts[-1] = total - ends[-1]
    if counts[-1] == 0:
        counts = counts[:-1]
    return RleMask(width, height, tuple(counts.tolist()))


def rle_from_patch(patch: np.ndarray, x: int, y: int, width: int, height: int) -> RleMask:
    """Encode a boolean patch placed at (x, y) inside a width x height frame"""
    patch = np.asarray(patch, dtype=bool)
    ph, pw = patch.shape
    if x < 0 or y < 0 or x + pw > width or y + ph > height:
        raise RleError(f"Patch {pw}x{ph} at ({x}, {y}) exceeds frame {width}x{height}")
    local = np.flatnonzero(patch.ravel(order="F"))
    cols = local // ph
    rows = local % ph
    return rle_from_indices((x + cols) * height + (y + rows), width, height)


def rle_patch(mask: RleMask, x: int, y: int, w: int, h: int) -> np.ndarray:
    """Decode only the (x, y, w, h) window of a mask"""
    out = np.zeros((h, w), dtype=bool)
    idx = mask.indices()
    if idx.size == 0:
        return out
    xs = idx // mask.height - x
    ys = idx % mask.height - y
    keep = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    out[ys[keep], xs[keep]] = True
    return out


def mask_iou(a: RleMask, b: RleMask) -> float:
    if (a.width, a.height) != (b.width, b.height):
        raise RleError(
            f"Mask dimension mismatch: {a.width}x{a.height} vs {b.width}x{b.height}"
        )
    return indices_iou(a.indices(), b.indices())


def indices_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two sorted unique index sets; 0 when both are empty"""
    union_hint = a.size + b.size
    if union_hint == 0:
        return 0.0
    inter = np.intersect1d(a, b, assume_unique=True).size
    return inter / (union_hint - inter)


def bbox_iou(a: Sequence[float], b: Sequence[float]) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def bbox_iou_matrix(boxes: np.ndarray) -> np.ndarray:
    """Pairwise IoU of an (n, 4) array of xywh boxes"""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x0, y0 = boxes[:, 0], boxes[:, 1]
    x1, y1 = x0 + boxes[:, 2], y0 + boxes[:, 3]
    iw = np.clip(np.minimum(x1[:, None], x1[None, :]) - np.maximum(x0[:, None], x0[None, :]), 0, None)
    ih = np.clip(np.minimum(y1[:, None], y1[None, :]) - np.maximum(y0[:, None], y0[None, :]), 0, None)
    inter = iw * ih
    area = boxes[:, 2] * boxes[:, 3]
    union = area[:, None] + area[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


@dataclass(frozen=True)
class Detection:
    tile_id: str
    bbox: BBox
    score: float
    category: int
    mask: RleMask

    def __post_init__(self):
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))

    def validate(self, tile_width: int, tile_height: int) -> None:
        if not all(math.isfinite(v) for v in (*self.bbox, self.score)):
            raise DetectionFormatError(f"bbox {self.bbox} and score {self.score} must be finite")
        x, y, w, h = self.bbox
        if w <= 0 or h <= 0:
            raise DetectionFormatError(f"bbox {self.bbox} must have positive extents")
        if x < 0 or y < 0 or x + w > tile_width or y + h > tile_height:
            raise DetectionFormatError(
                f"bbox {self.bbox} leaves the {tile_width}x{tile_height} tile"
            )
        if not 0.0 <= self.score <= 1.0:
            raise DetectionFormatError(f"score {self.score} outside [0, 1]")
        if (self.mask.width, self.mask.height) != (tile_width, tile_height):
            raise DetectionFormatError(
                f"mask is {self.mask.width}x{self.mask.height}, tile is {tile_width}x{tile_height}"
            )
        tight = self.mask.foreground_bbox()
        if tight is None:
            raise DetectionFormatError("mask has no foreground")
        fx, fy, fw, fh = tight
        slack = BBOX_TOLERANCE + 1e-6
        if (
            abs(x - fx) > slack
            or abs(y - fy) > slack
            or abs(x + w - (fx + fw)) > slack
            or abs(y + h - (fy + fh)) > slack
        ):
            raise DetectionFormatError(
                f"bbox {self.bbox} does not match the mask foreground box {tight}"
            )

    def to_record(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "bbox": list(self.bbox),
            "score": self.score,
            "category_id": self.category,
            "segmentation": self.mask.to_coco(),
        }


@dataclass(frozen=True)
class GlobalInstance:
    """Instance in whole-image coordinates; the mask lives in a tight local frame"""
    instance_id: int
    bbox: BBox
    score: float
    category: int
    mask: RleMask
    frame_x: int
    frame_y: int

    def __post_init__(self):
        object.__setattr__(self, "bbox", tuple(float(v) for v in self.bbox))

    @property
    def area(self) -> int:
        return self.mask.area

    @property
    def frame(self) -> Tuple[int, int, int, int]:
        return self.frame_x, self.frame_y, self.mask.width, self.mask.height

    def pixel_indices(self, image_height: int) -> np.ndarray:
        """Sorted column-major indices of foreground pixels in the full image"""
        local = self.mask.indices()
        cols = local // self.mask.height
        rows = local % self.mask.height
        return (self.frame_x + cols) * image_height + (self.frame_y + rows)

    def to_record(self, image_id: str, image_width: int, image_height: int) -> dict:
        full = rle_from_indices(self.pixel_indices(image_height), image_width, image_height)
        return {
            "image_id": image_id,
            "ann_id": self.instance_id,
            "bbox": list(self.bbox),
            "score": self.score,
            "category_id": self.category,
            "segmentation": full.to_coco(),
        }

    @classmethod
    def from_record(cls, record: Mapping, image_width: int, image_height: int) -> "GlobalInstance":
        full = RleMask.from_coco(record["segmentation"])
        if (full.width, full.height) != (image_width, image_height):
            raise DetectionFormatError(
                f"segmentation size {full.height}x{full.width} does not match image "
                f"{image_height}x{image_width}"
            )
        return instance_from_indices(
            full.indices(),
            image_height,
            instance_id=int(record["ann_id"]),
            bbox=tuple(record["bbox"]),
            score=float(record.get("score", 1.0)),
            category=int(record.get("category_id", 1)),
        )


def instance_from_indices(indices: np.ndarray, image_height: int, instance_id: int,
                          bbox: Optional[Sequence[float]], score: float,
                          category: int) -> GlobalInstance:
    """Re-frame global foreground indices into a tight local mask"""
    if indices.size == 0:
        x, y = (int(bbox[0]), int(bbox[1])) if bbox else (0, 0)
        return GlobalInstance(instance_id, tuple(bbox or (x, y, 0, 0)), score, category,
                              RleMask(1, 1, (1,)), x, y)
    xs = indices // image_height
    ys = indices % image_height
    x0, y0 = int(xs.min()), int(ys.min())
    w = int(xs.max()) - x0 + 1
    h = int(ys.max()) - y0 + 1
    local = rle_from_indices((xs - x0) * h + (ys - y0), w, h)
    if bbox is None:
        bbox = (x0, y0, w, h)
    return GlobalInstance(instance_id, tuple(bbox), score, category, local, x0, y0)


@dataclass(frozen=True)
class InstanceSet:
    image_id: str
    width: int
    height: int
    instances: Tuple[GlobalInstance, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        self.validate()

    def __len__(self):
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)

    def validate(self) -> None:
        seen = set()
        eps = 1e-6
        for inst in self.instances:
            if inst.instance_id < 1 or inst.instance_id in seen:
                raise DetectionFormatError(
                    f"{self.image_id}: duplicate or invalid instance id {inst.instance_id}"
                )
            seen.add(inst.instance_id)
            if not all(math.isfinite(v) for v in (*inst.bbox, inst.score)):
                raise DetectionFormatError(
                    f"{self.image_id}: instance {inst.instance_id} has a non-finite bbox or score"
                )
            x, y, w, h = inst.bbox
            if x < -eps or y < -eps or x + w > self.width + eps or y + h > self.height + eps:
                raise DetectionFormatError(
                    f"{self.image_id}: instance {inst.instance_id} bbox {inst.bbox} leaves "
                    f"the {self.width}x{self.height} image"
                )
            fx, fy, fw, fh = inst.frame
            if fx < 0 or fy < 0 or fx + fw > self.width or fy + fh > self.height:
                raise DetectionFormatError(
                    f"{self.image_id}: instance {inst.instance_id} mask frame {inst.frame} "
                    "leaves the image"
                )

    def to_records(self) -> List[dict]:
        ordered = sorted(self.instances, key=lambda inst: inst.instance_id)
        return [inst.to_record(self.image_id, self.width, self.height) for inst in ordered]


def crop_instance(instance: GlobalInstance, tile: "Tile",
                  shift: Tuple[int, int] = (0, 0), score: Optional[float] = None) -> Optional[Detection]:
    """Clip a (possibly shifted) global instance to a tile, as a tile-local detection"""
    fx, fy, fw, fh = instance.frame
    fx += shift[0]
    fy += shift[1]
    x0 = max(fx, tile.origin_x)
    y0 = max(fy, tile.origin_y)
    x1 = min(fx + fw, tile.origin_x + tile.width)
    y1 = min(fy + fh, tile.origin_y + tile.height)
    if x0 >= x1 or y0 >= y1:
        return None
    patch = rle_patch(instance.mask, x0 - fx, y0 - fy, x1 - x0, y1 - y0)
    cols = np.flatnonzero(patch.any(axis=0))
    if cols.size == 0:
        return None
    rows = np.flatnonzero(patch.any(axis=1))
    cx0, cx1 = int(cols[0]), int(cols[-1]) + 1
    cy0, cy1 = int(rows[0]), int(rows[-1]) + 1
    lx = x0 - tile.origin_x + cx0
    ly = y0 - tile.origin_y + cy0
    mask = rle_from_patch(patch[cy0:cy1, cx0:cx1], lx, ly, tile.width, tile.height)
    return Detection(
        tile_id=tile.tile_id,
        bbox=(lx, ly, cx1 - cx0, cy1 - cy0),
        score=instance.score if score is None else score,
        category=instance.category,
        mask=mask,
    )


def detection_from_record(record: Mapping) -> Detection:
    try:
        bbox = record["bbox"]
        if len(bbox) != 4:
            raise DetectionFormatError(f"bbox must have 4 values, got {len(bbox)}")
        return Detection(
            tile_id=str(record["tile_id"]),
            bbox=tuple(float(v) for v in bbox),
            score=float(record["score"]),
            category=int(record["category_id"]),
            mask=RleMask.from_coco(record["segmentation"]),
        )
    except KeyError as e:
        raise DetectionFormatError(f"missing field {e}") from e
    except RleError as e:
        raise DetectionFormatError(str(e)) from e
    except (TypeError, ValueError) as e:
        if isinstance(e, DetectionFormatError):
            raise
        raise DetectionFormatError(f"malformed field: {e}") from e


def parse_detections(path: Union[str, Path], grid: "TileGrid") -> Dict[str, List[Detection]]:
    """Read a detections JSONL file and group validated records by tile.

    Groups follow the grid's tile order; records keep file order within a tile.
    """
    grouped: Dict[str, List[Detection]] = {}
    index = -1
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            index += 1
            where = f"record {index} (line {lineno})"
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DetectionFormatError(f"{where}: invalid JSON: {e}") from e
            try:
                det = detection_from_record(record)
                tile = grid.tile(det.tile_id)
                if tile is None:
                    raise DetectionFormatError(f"unknown tile_id '{det.tile_id}'")
                det.validate(tile.width, tile.height)
            except DetectionFormatError as e:
                raise DetectionFormatError(f"{where}: {e}") from e
            grouped.setdefault(det.tile_id, []).append(det)

    ordered = {t.tile_id: grouped[t.tile_id] for t in grid.tiles if t.tile_id in grouped}
    logger.info("Parsed %d detections over %d tiles from %s", index + 1, len(ordered), path)
    return ordered


def write_detections(path: Union[str, Path], per_tile: Mapping[str, Iterable[Detection]]) -> int:
    """Write detections JSONL in the given tile order; returns the record count"""
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for dets in per_tile.values():
            for det in dets:
                f.write(json.dumps(det.to_record()) + "\n")
                n += 1
    return n


def with_score(det: Detection, score: float) -> Detection:
    return replace(det, score=float(score))
