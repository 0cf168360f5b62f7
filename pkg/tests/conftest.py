import numpy as np
import pytest

from instances import GlobalInstance, InstanceSet, rle_encode
from raster import RasterImage
from tiling import GridParams


@pytest.fixture
def small_params():
    """A grid small enough to reason about by hand: W=64, S=48, m=2"""
    return GridParams(window=64, stride=48, margin=2)


@pytest.fixture
def make_rect():
    """Factory for rectangular global instances"""

    def _make(instance_id, x, y, w, h, score=1.0, category=1):
        return GlobalInstance(
            instance_id=instance_id,
            bbox=(x, y, w, h),
            score=score,
            category=category,
            mask=rle_encode(np.ones((h, w), dtype=bool)),
            frame_x=x,
            frame_y=y,
        )

    return _make


@pytest.fixture
def make_set(make_rect):
    """Factory for an InstanceSet of rectangles given as (x, y, w, h[, score])"""

    def _make(width, height, rects, image_id="img"):
        instances = [make_rect(i + 1, *r) for i, r in enumerate(rects)]
        return InstanceSet(image_id, width, height, tuple(instances))

    return _make


@pytest.fixture
def bgrn_raster():
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 4096, size=(12, 17, 4), dtype=np.uint16)
    return RasterImage(pixels, bit_depth=16)
