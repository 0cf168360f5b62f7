"""
Multi-band raster images, PNG / planar-container I/O, and band combinations
"""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from errors import BandSelectionError, RasterFormatError

logger = logging.getLogger(__name__)

# On-disk order of 4-band inputs
BAND_ORDER = ("blue", "green", "red", "nir")

_DTYPES = {8: np.dtype("<u1"), 16: np.dtype("<u2")}
_PNG_MODES = {1: "L", 2: "LA", 3: "RGB", 4: "RGBA"}


def default_band_names(bands: int) -> Tuple[str, ...]:
    if bands == len(BAND_ORDER):
        return BAND_ORDER
    return tuple(f"band_{i}" for i in range(bands))


@dataclass(frozen=True, eq=False)
class RasterImage:
    """Immutable multi-band pixel grid.

    ``pixels`` has shape (height, width, bands), so its row-major flattening
    is the band-interleaved-by-pixel sample sequence.
    """
    pixels: np.ndarray
    bit_depth: int = 8
    band_names: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.ndim != 3:
            raise RasterFormatError(f"Raster must be 2-D or 3-D, got shape {arr.shape}")
        if self.bit_depth not in _DTYPES:
            raise RasterFormatError(f"Unsupported bit depth {self.bit_depth} (expected 8 or 16)")
        height, width, bands = arr.shape
        if width < 1 or height < 1:
            raise RasterFormatError(f"Raster must be at least 1x1, got {width}x{height}")
        if not 1 <= bands <= 4:
            raise RasterFormatError(f"Unsupported band count {bands} (expected 1-4)")
        expected = np.uint8 if self.bit_depth == 8 else np.uint16
        if arr.dtype != expected:
            raise RasterFormatError(
                f"{self.bit_depth}-bit raster needs {np.dtype(expected).name} samples, got {arr.dtype}"
            )
        names = tuple(self.band_names) or default_band_names(bands)
        if len(names) != bands:
            raise RasterFormatError(f"{len(names)} band names given for {bands} bands")

        view = arr.view()
        view.flags.writeable = False
        object.__setattr__(self, "pixels", view)
        object.__setattr__(self, "band_names", names)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def bands(self) -> int:
        return self.pixels.shape[2]

    @property
    def samples(self) -> np.ndarray:
        """Row-major, band-interleaved-by-pixel samples"""
        return self.pixels.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return (
            self.bit_depth == other.bit_depth
            and self.pixels.shape == other.pixels.shape
            and bool(np.array_equal(self.pixels, other.pixels))
        )

    __hash__ = None

    def __repr__(self):
        return f"RasterImage({self.width}x{self.height}x{self.bands} @{self.bit_depth}-bit)"


class BandSelector(Enum):
    RGB = "rgb"
    NIR_G_B = "nirgb"
    CUSTOM = "custom"


_PRESETS = {
    BandSelector.RGB: (2, 1, 0),
    BandSelector.NIR_G_B: (3, 1, 0),
}


@dataclass(frozen=True)
class BandCombo:
    selector: BandSelector
    indices: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.selector in _PRESETS:
            object.__setattr__(self, "indices", _PRESETS[self.selector])
        indices = tuple(int(i) for i in self.indices)
        if not 1 <= len(indices) <= 4:
            raise BandSelectionError(f"Band combination needs 1-4 indices, got {len(indices)}")
        if any(i < 0 for i in indices):
            raise BandSelectionError(f"Band indices must be non-negative: {indices}")
        object.__setattr__(self, "indices", indices)

    @classmethod
    def rgb(cls) -> "BandCombo":
        return cls(BandSelector.RGB)

    @classmethod
    def nir_g_b(cls) -> "BandCombo":
        return cls(BandSelector.NIR_G_B)

    @classmethod
    def custom(cls, indices: Sequence[int]) -> "BandCombo":
        return cls(BandSelector.CUSTOM, tuple(indices))

    @classmethod
    def from_name(cls, name: str) -> "BandCombo":
        """Parse 'rgb', 'nirgb' or a comma-separated index list like '3,1,0'"""
        key = name.strip().lower()
        for selector in (BandSelector.RGB, BandSelector.NIR_G_B):
            if key == selector.value:
                return cls(selector)
        try:
            return cls.custom(int(part) for part in key.split(","))
        except ValueError:
            raise BandSelectionError(f"Unknown band combination '{name}'") from None

    def compose(self, other: "BandCombo") -> "BandCombo":
        """Selecting ``self`` then ``other`` equals selecting the result"""
        try:
            return BandCombo.custom(self.indices[i] for i in other.indices)
        except IndexError:
            raise BandSelectionError(
                f"Cannot compose {other.indices} after {self.indices}"
            ) from None


def select_bands(image: RasterImage, combo: BandCombo) -> RasterImage:
    """Project/permute bands; samples are copied, never modified"""
    bad = [i for i in combo.indices if i >= image.bands]
    if bad:
        raise BandSelectionError(
            f"Band index {bad[0]} out of range for a {image.bands}-band image"
        )
    indices = list(combo.indices)
    return RasterImage(
        pixels=np.ascontiguousarray(image.pixels[:, :, indices]),
        bit_depth=image.bit_depth,
        band_names=tuple(image.band_names[i] for i in indices),
    )


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_raster(path: Union[str, Path]) -> RasterImage:
    """Load a PNG or a planar ``.bsq`` container with its JSON sidecar"""
    path = Path(path)
    if path.suffix.lower() == ".bsq":
        image = _load_planar(path)
    elif path.suffix.lower() == ".png":
        image = _load_png(path)
    else:
        raise RasterFormatError(f"Unsupported raster format '{path.suffix}' ({path})")
    logger.debug("Loaded %s from %s", image, path)
    return image


def save_raster(image: RasterImage, path: Union[str, Path]) -> None:
    path = Path(path)
    if path.suffix.lower() == ".bsq":
        _save_planar(image, path)
    elif path.suffix.lower() == ".png":
        _save_png(image, path)
    else:
        raise RasterFormatError(f"Unsupported raster format '{path.suffix}' ({path})")
    logger.debug("Saved %s to %s", image, path)


def _load_planar(path: Path) -> RasterImage:
    header_path = sidecar_path(path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        raise RasterFormatError(f"Unreadable header {header_path}: {e}") from e

    try:
        width = int(header["width"])
        height = int(header["height"])
        bands = int(header["bands"])
        bit_depth = int(header["bit_depth"])
    except (KeyError, TypeError, ValueError) as e:
        raise RasterFormatError(f"Malformed header {header_path}: {e}") from e
    if bit_depth not in _DTYPES:
        raise RasterFormatError(f"Unsupported bit depth {bit_depth} in {header_path}")
    if not 1 <= bands <= 4:
        raise RasterFormatError(f"Unsupported band count {bands} in {header_path}")
    if width < 1 or height < 1:
        raise RasterFormatError(f"Invalid raster size {width}x{height} in {header_path}")

    dtype = _DTYPES[bit_depth]
    payload = path.read_bytes()
    expected = width * height * bands * dtype.itemsize
    if len(payload) != expected:
        raise RasterFormatError(
            f"payload length mismatch in {path}: header implies {expected} bytes, got {len(payload)}"
        )

    planes = np.frombuffer(payload, dtype=dtype).reshape(bands, height, width)
    pixels = np.ascontiguousarray(planes.transpose(1, 2, 0)).astype(dtype.newbyteorder("="), copy=False)
    names = header.get("band_names") or ()
    return RasterImage(pixels=pixels, bit_depth=bit_depth, band_names=tuple(names))


def _save_planar(image: RasterImage, path: Path) -> None:
    dtype = _DTYPES[image.bit_depth]
    planes = np.ascontiguousarray(image.pixels.transpose(2, 0, 1)).astype(dtype, copy=False)
    header = {
        "width": image.width,
        "height": image.height,
        "bands": image.bands,
        "bit_depth": image.bit_depth,
        "band_names": list(image.band_names),
    }
    path.write_bytes(planes.tobytes())
    sidecar_path(path).write_text(json.dumps(header, indent=2) + "\n")


def _load_png(path: Path) -> RasterImage:
    try:
        with Image.open(path) as img:
            img.load()
            mode = img.mode
            if mode == "P":
                img = img.convert("RGBA" if "transparency" in img.info else "RGB")
            elif mode == "1":
                img = img.convert("L")
            elif mode not in _PNG_MODES.values():
                raise RasterFormatError(
                    f"Unsupported PNG mode '{mode}' in {path} (8-bit L/LA/RGB/RGBA only; "
                    "use the .bsq container for 16-bit data)"
                )
            pixels = np.array(img, dtype=np.uint8)
    except UnidentifiedImageError as e:
        raise RasterFormatError(f"Unreadable PNG {path}: {e}") from e
    return RasterImage(pixels=pixels, bit_depth=8)


def _save_png(image: RasterImage, path: Path) -> None:
    if image.bit_depth != 8:
        raise RasterFormatError(
            f"PNG output holds 8-bit data only; save the {image.bit_depth}-bit raster as .bsq"
        )
    pixels = image.pixels[:, :, 0] if image.bands == 1 else image.pixels
    # fromarray infers L/LA/RGB/RGBA from the trailing axis
    Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PNG")
