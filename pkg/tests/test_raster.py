import json

import numpy as np
import pytest

from errors import BandSelectionError, RasterFormatError
from raster import BAND_ORDER, BandCombo, BandSelector, RasterImage, load_raster, save_raster, select_bands


class TestRasterImage:
    def test_defaults_for_four_bands(self, bgrn_raster):
        assert bgrn_raster.band_names == BAND_ORDER
        assert (bgrn_raster.width, bgrn_raster.height, bgrn_raster.bands) == (17, 12, 4)

    def test_pixels_are_read_only(self, bgrn_raster):
        with pytest.raises(ValueError):
            bgrn_raster.pixels[0, 0, 0] = 1

    def test_samples_are_band_interleaved(self):
        pixels = np.arange(2 * 3 * 2, dtype=np.uint8).reshape(2, 3, 2)
        image = RasterImage(pixels)
        assert image.samples.tolist() == list(range(12))

    def test_two_dimensional_input_becomes_one_band(self):
        image = RasterImage(np.zeros((4, 5), dtype=np.uint8))
        assert image.bands == 1
        assert image.band_names == ("band_0",)

    @pytest.mark.parametrize("bands", [0, 5])
    def test_band_count_limits(self, bands):
        with pytest.raises(RasterFormatError):
            RasterImage(np.zeros((2, 2, bands), dtype=np.uint8))

    def test_dtype_must_match_bit_depth(self):
        with pytest.raises(RasterFormatError, match="16-bit"):
            RasterImage(np.zeros((2, 2, 1), dtype=np.uint8), bit_depth=16)


class TestPlanarContainer:
    def test_round_trip_keeps_samples_and_names(self, tmp_path, bgrn_raster):
        path = tmp_path / "field.bsq"
        save_raster(bgrn_raster, path)
        loaded = load_raster(path)
        assert loaded == bgrn_raster
        assert loaded.band_names == BAND_ORDER
        assert loaded.bit_depth == 16

    def test_payload_is_band_sequential_little_endian(self, tmp_path):
        pixels = np.array([[[1, 2], [3, 4]]], dtype=np.uint16)  # 1x2, two bands
        path = tmp_path / "tiny.bsq"
        save_raster(RasterImage(pixels, bit_depth=16), path)
        assert path.read_bytes() == bytes([1, 0, 3, 0, 2, 0, 4, 0])
        header = json.loads((tmp_path / "tiny.bsq.json").read_text())
        assert header["width"] == 2 and header["height"] == 1 and header["bands"] == 2

    def test_truncated_payload(self, tmp_path, bgrn_raster):
        path = tmp_path / "field.bsq"
        save_raster(bgrn_raster, path)
        path.write_bytes(path.read_bytes()[:-2])
        with pytest.raises(RasterFormatError, match="payload length mismatch"):
            load_raster(path)

    def test_missing_header_is_an_os_error(self, tmp_path):
        path = tmp_path / "orphan.bsq"
        path.write_bytes(b"\x00" * 8)
        with pytest.raises(OSError):
            load_raster(path)

    def test_unwritable_destination(self, tmp_path, bgrn_raster):
        blocker = tmp_path / "not_a_dir"
        blocker.write_text("x")
        with pytest.raises(OSError):
            save_raster(bgrn_raster, blocker / "field.bsq")


class TestPng:
    def test_round_trip_rgb(self, tmp_path):
        pixels = np.random.default_rng(1).integers(0, 256, size=(9, 7, 3), dtype=np.uint8)
        path = tmp_path / "tile.png"
        save_raster(RasterImage(pixels), path)
        assert load_raster(path) == RasterImage(pixels)

    def test_sixteen_bit_refused(self, tmp_path, bgrn_raster):
        with pytest.raises(RasterFormatError, match=".bsq"):
            save_raster(bgrn_raster, tmp_path / "tile.png")

    def test_garbage_file(self, tmp_path):
        path = tmp_path / "broken.png"
        path.write_bytes(b"not a png at all")
        with pytest.raises(RasterFormatError):
            load_raster(path)

    def test_unknown_suffix(self, tmp_path, bgrn_raster):
        with pytest.raises(RasterFormatError, match="Unsupported raster format"):
            save_raster(bgrn_raster, tmp_path / "tile.tif")


class TestBands:
    def test_rgb_preset_reorders_bgrn(self, bgrn_raster):
        rgb = select_bands(bgrn_raster, BandCombo.rgb())
        assert rgb.band_names == ("red", "green", "blue")
        np.testing.assert_array_equal(rgb.pixels[..., 0], bgrn_raster.pixels[..., 2])
        np.testing.assert_array_equal(rgb.pixels[..., 2], bgrn_raster.pixels[..., 0])

    def test_nir_g_b_preset(self, bgrn_raster):
        out = select_bands(bgrn_raster, BandCombo.nir_g_b())
        assert out.band_names == ("nir", "green", "blue")

    def test_selection_leaves_source_untouched(self, bgrn_raster):
        before = bgrn_raster.pixels.copy()
        select_bands(bgrn_raster, BandCombo.custom([3, 3, 0]))
        np.testing.assert_array_equal(bgrn_raster.pixels, before)

    def test_out_of_range_index(self):
        image = RasterImage(np.zeros((2, 2, 3), dtype=np.uint8))
        with pytest.raises(BandSelectionError, match="out of range"):
            select_bands(image, BandCombo.nir_g_b())

    def test_compose_matches_sequential_selection(self, bgrn_raster):
        first = BandCombo.custom([3, 2, 1, 0])
        second = BandCombo.rgb()
        composed = first.compose(second)
        assert select_bands(select_bands(bgrn_raster, first), second) == select_bands(bgrn_raster, composed)

    @pytest.mark.parametrize(
        "name, indices",
        [("rgb", (2, 1, 0)), ("NIRGB", (3, 1, 0)), ("3,1,0", (3, 1, 0)), ("1", (1,))],
    )
    def test_from_name(self, name, indices):
        assert BandCombo.from_name(name).indices == indices

    def test_from_name_rejects_garbage(self):
        with pytest.raises(BandSelectionError):
            BandCombo.from_name("infrared")

    def test_preset_ignores_given_indices(self):
        assert BandCombo(BandSelector.RGB, (0,)).indices == (2, 1, 0)


class TestRoundTrip:
    @pytest.mark.parametrize("bit_depth, suffix", [(8, ".png"), (8, ".bsq"), (16, ".bsq")])
    @pytest.mark.parametrize("bands", [1, 2, 3, 4])
    def test_random_rasters(self, tmp_path, bands, bit_depth, suffix):
        rng = np.random.default_rng(bands * 100 + bit_depth)
        dtype = np.uint8 if bit_depth == 8 else np.uint16
        for i in range(20):
            height, width = (int(v) for v in rng.integers(1, 40, size=2))
            pixels = rng.integers(0, np.iinfo(dtype).max, size=(height, width, bands), dtype=dtype, endpoint=True)
            image = RasterImage(pixels, bit_depth=bit_depth)
            path = tmp_path / f"r{i}{suffix}"
            save_raster(image, path)
            loaded = load_raster(path)
            assert loaded == image
            assert loaded.bands == bands

    @pytest.mark.parametrize("suffix", [".png", ".bsq"])
    def test_single_pixel(self, tmp_path, suffix):
        image = RasterImage(np.array([[[7, 8, 9]]], dtype=np.uint8))
        save_raster(image, tmp_path / f"dot{suffix}")
        loaded = load_raster(tmp_path / f"dot{suffix}")
        assert (loaded.width, loaded.height, loaded.bands) == (1, 1, 3)
        assert loaded == image

    def test_resaving_a_sixteen_bit_file_is_byte_identical(self, tmp_path):
        rng = np.random.default_rng(4)
        width, height, bands = 23, 11, 3
        source = tmp_path / "source.bsq"
        source.write_bytes(rng.bytes(width * height * bands * 2))
        header = {"width": width, "height": height, "bands": bands, "bit_depth": 16,
                  "band_names": ["band_0", "band_1", "band_2"]}
        (tmp_path / "source.bsq.json").write_text(json.dumps(header, indent=2) + "\n")

        copy = tmp_path / "copy.bsq"
        save_raster(load_raster(source), copy)
        assert copy.read_bytes() == source.read_bytes()
        assert (tmp_path / "copy.bsq.json").read_bytes() == (tmp_path / "source.bsq.json").read_bytes()
