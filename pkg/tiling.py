"""
Sliding-window tile grids with target/ignore areas, tile extraction and dataset export
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from errors import GridError
from instances import InstanceSet, crop_instance, write_detections
from raster import RasterImage, save_raster

logger = logging.getLogger(__name__)

DEFAULT_WINDOW = 1536
DEFAULT_STRIDE = 1280
DEFAULT_MARGIN = 2


@dataclass(frozen=True)
class GridParams:
    window: int = DEFAULT_WINDOW
    stride: int = DEFAULT_STRIDE
    margin: int = DEFAULT_MARGIN

    def __post_init__(self):
        if self.window < 1:
            raise GridError(f"window must be >= 1, got {self.window}")
        if not 1 <= self.stride <= self.window:
            raise GridError(f"stride must be in [1, window={self.window}], got {self.stride}")
        if not 0 <= self.margin <= self.window - self.stride:
            raise GridError(
                f"margin must be in [0, window - stride = {self.window - self.stride}], got {self.margin}"
            )

    @classmethod
    def for_export(cls, window: int) -> "GridParams":
        """Abutting tiles, whole-tile targets (no fusion downstream)"""
        return cls(window=window, stride=window, margin=0)


@dataclass(frozen=True)
class Rect:
    """Half-open rectangle [x, x+w) x [y, y+h)"""
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise GridError(f"Rect extents must be non-negative, got {self.w}x{self.h}")

    @property
    def right(self) -> int:
        return self.x + self.w

    @property
    def bottom(self) -> int:
        return self.y + self.h

    def contains(self, px: float, py: float) -> bool:
        return self.x <= px < self.right and self.y <= py < self.bottom

    def translate(self, dx: int, dy: int) -> "Rect":
        return Rect(self.x + dx, self.y + dy, self.w, self.h)

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "w": self.w, "h": self.h}

    @classmethod
    def from_dict(cls, d: dict) -> "Rect":
        return cls(int(d["x"]), int(d["y"]), int(d["w"]), int(d["h"]))


@dataclass(frozen=True)
class Tile:
    tile_id: str
    row: int
    col: int
    origin_x: int
    origin_y: int
    width: int
    height: int
    target: Rect

    @property
    def extent(self) -> Rect:
        return Rect(self.origin_x, self.origin_y, self.width, self.height)

    @property
    def global_target(self) -> Rect:
        return self.target.translate(self.origin_x, self.origin_y)

    def to_dict(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "row": self.row,
            "col": self.col,
            "x": self.origin_x,
            "y": self.origin_y,
            "w": self.width,
            "h": self.height,
            "target": self.target.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tile":
        return cls(
            tile_id=str(d["tile_id"]),
            row=int(d["row"]),
            col=int(d["col"]),
            origin_x=int(d["x"]),
            origin_y=int(d["y"]),
            width=int(d["w"]),
            height=int(d["h"]),
            target=Rect.from_dict(d["target"]),
        )


@dataclass(frozen=True)
class TileGrid:
    image_width: int
    image_height: int
    params: GridParams
    tiles: Tuple[Tile, ...]
    image_id: str = "image"
    _index: Dict[str, int] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "tiles", tuple(self.tiles))
        index = {}
        for i, tile in enumerate(self.tiles):
            if tile.tile_id in index:
                raise GridError(f"Duplicate tile id '{tile.tile_id}'")
            index[tile.tile_id] = i
        object.__setattr__(self, "_index", index)

    def __len__(self):
        return len(self.tiles)

    def tile(self, tile_id: str) -> Optional[Tile]:
        i = self._index.get(tile_id)
        return None if i is None else self.tiles[i]

    def tile_index(self, tile_id: str) -> int:
        return self._index[tile_id]

    def to_manifest(self) -> dict:
        return {
            "image_id": self.image_id,
            "image_width": self.image_width,
            "image_height": self.image_height,
            "window": self.params.window,
            "stride": self.params.stride,
            "margin": self.params.margin,
            "tiles": [t.to_dict() for t in self.tiles],
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> "TileGrid":
        try:
            params = GridParams(int(manifest["window"]), int(manifest["stride"]), int(manifest["margin"]))
            grid = cls(
                image_width=int(manifest["image_width"]),
                image_height=int(manifest["image_height"]),
                params=params,
                tiles=tuple(Tile.from_dict(t) for t in manifest["tiles"]),
                image_id=str(manifest["image_id"]),
            )
        except (KeyError, TypeError) as e:
            raise GridError(f"Malformed manifest: {e}") from e
        for tile in grid.tiles:
            if (tile.origin_x < 0 or tile.origin_y < 0
                    or tile.origin_x + tile.width > grid.image_width
                    or tile.origin_y + tile.height > grid.image_height):
                raise GridError(f"Manifest tile '{tile.tile_id}' leaves the image extent")
            if tile.target.right > tile.width or tile.target.bottom > tile.height or tile.target.x < 0 or tile.target.y < 0:
                raise GridError(f"Manifest tile '{tile.tile_id}' has a target outside the tile")
        return grid


def axis_tile_count(length: int, params: GridParams) -> int:
    if length <= params.window:
        return 1
    return math.ceil((length - params.window) / params.stride) + 1


def compute_target_area(k: int, n: int, t: int, params: GridParams) -> Tuple[int, int]:
    """Half-open target interval [start, end) of tile k on one axis, tile-local.

    Interior tiles get [m, m+S); the first tile absorbs its leading ignore
    strip and the last tile everything up to its clipped size.
    """
    if not 0 <= k < n or t < 1:
        raise GridError(f"Invalid tile position k={k}, n={n}, size={t}")
    m, s = params.margin, params.stride
    if n == 1:
        return 0, t
    if k == 0:
        return 0, m + s
    if k == n - 1:
        return m, t
    return m, m + s


def axis_intervals(length: int, params: GridParams) -> List[Tuple[int, int, Tuple[int, int]]]:
    """Per-axis (origin, size, global target interval) of every tile"""
    n = axis_tile_count(length, params)
    out = []
    for k in range(n):
        origin = k * params.stride
        size = min(params.window, length - origin)
        start, end = compute_target_area(k, n, size, params)
        out.append((origin, size, (origin + start, origin + end)))
    if n > 1:
        assert out[-1][1] > params.window - params.stride, "last tile too small"
    return out


def make_tile_id(image_id: str, row: int, col: int) -> str:
    return f"{image_id}_r{row:03d}_c{col:03d}"


def compute_tile_grid(image_width: int, image_height: int, params: GridParams,
                      image_id: str = "image") -> TileGrid:
    if image_width < 1 or image_height < 1:
        raise GridError(f"Image must be at least 1x1, got {image_width}x{image_height}")
    cols = axis_intervals(image_width, params)
    rows = axis_intervals(image_height, params)
    tiles = []
    for r, (oy, th, (ty0, ty1)) in enumerate(rows):
        for c, (ox, tw, (tx0, tx1)) in enumerate(cols):
            tiles.append(Tile(
                tile_id=make_tile_id(image_id, r, c),
                row=r,
                col=c,
                origin_x=ox,
                origin_y=oy,
                width=tw,
                height=th,
                target=Rect(tx0 - ox, ty0 - oy, tx1 - tx0, ty1 - ty0),
            ))
    logger.debug("Grid %dx%d over %dx%d image: %d tiles",
                 len(cols), len(rows), image_width, image_height, len(tiles))
    return TileGrid(image_width, image_height, params, tuple(tiles), image_id)


def extract_tile(image: RasterImage, tile: Tile) -> RasterImage:
    if (tile.origin_x < 0 or tile.origin_y < 0
            or tile.origin_x + tile.width > image.width
            or tile.origin_y + tile.height > image.height):
        raise GridError(
            f"Tile '{tile.tile_id}' ({tile.origin_x}, {tile.origin_y}, {tile.width}x{tile.height}) "
            f"is outside the {image.width}x{image.height} image"
        )
    crop = image.pixels[tile.origin_y:tile.origin_y + tile.height,
                        tile.origin_x:tile.origin_x + tile.width]
    return RasterImage(np.ascontiguousarray(crop), image.bit_depth, image.band_names)


def tile_raster_name(tile: Tile, image: RasterImage) -> str:
    suffix = ".png" if image.bit_depth == 8 else ".bsq"
    return tile.tile_id + suffix


def _export_one(image: RasterImage, tile: Tile, gt: Optional[InstanceSet],
                keep_empty: bool, out_dir: Path, write_rasters: bool) -> Optional[Tile]:
    clipped = []
    if gt is not None:
        for inst in gt.instances:
            det = crop_instance(inst, tile, score=1.0)
            if det is not None:
                clipped.append(det)
        if not clipped and not keep_empty:
            return None
    if write_rasters:
        save_raster(extract_tile(image, tile), out_dir / tile_raster_name(tile, image))
    if gt is not None:
        write_detections(out_dir / f"{tile.tile_id}.jsonl", {tile.tile_id: clipped})
    return tile


def export_dataset(image: RasterImage, grid: TileGrid, out_dir: Union[str, Path],
                   keep_empty: bool = True, gt: Optional[InstanceSet] = None,
                   threads: int = 1, write_rasters: bool = True) -> dict:
    """Write one raster per tile plus ``tiles.json``; returns the manifest"""
    if (image.width, image.height) != (grid.image_width, grid.image_height):
        raise GridError(
            f"Grid is for {grid.image_width}x{grid.image_height}, image is {image.width}x{image.height}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    results = Parallel(n_jobs=threads, backend="threading")(
        delayed(_export_one)(image, tile, gt, keep_empty, out_dir, write_rasters)
        for tile in grid.tiles
    )
    # Parallel preserves submission order, i.e. row-major tile order
    emitted = [t for t in results if t is not None]
    skipped = len(grid.tiles) - len(emitted)
    if skipped:
        logger.info("Skipped %d tiles without ground truth", skipped)

    manifest = TileGrid(grid.image_width, grid.image_height, grid.params,
                        tuple(emitted), grid.image_id).to_manifest()
    (out_dir / "tiles.json").write_text(json.dumps(manifest, indent=2) + "\n")
    logger.info("Exported %d tiles to %s", len(emitted), out_dir)
    return manifest


def split_dataset(tile_ids: Sequence[str], ratio_train: int = 5, ratio_val: int = 1,
                  seed: int = 0) -> Tuple[List[str], List[str]]:
    """Seeded shuffle then a nearest-integer ratio split"""
    if not tile_ids:
        raise GridError("Cannot split an empty tile list")
    if ratio_train < 1 or ratio_val < 1:
        raise GridError(f"Split ratios must be >= 1, got {ratio_train}:{ratio_val}")
    total = len(tile_ids)
    parts = ratio_train + ratio_val
    # round half up of total * train / (train + val)
    n_train = (2 * total * ratio_train + parts) // (2 * parts)
    order = np.random.default_rng(seed).permutation(total)
    shuffled = [tile_ids[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]
