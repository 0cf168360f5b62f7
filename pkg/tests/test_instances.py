import json

import numpy as np
import pytest

from errors import DetectionFormatError, RleError
from instances import (
    Detection,
    GlobalInstance,
    InstanceSet,
    RleMask,
    bbox_iou,
    crop_instance,
    mask_iou,
    parse_detections,
    rle_decode,
    rle_encode,
    rle_from_indices,
    rle_from_patch,
    rle_patch,
    write_detections,
)
from tiling import compute_tile_grid


class TestRle:
    def test_column_major_with_leading_background(self):
        grid = np.array([[0, 1], [1, 1]], dtype=bool)
        # column-major scan: 0, 1, 1, 1
        assert rle_encode(grid).counts == (1, 3)

    def test_leading_foreground_gets_zero_run(self):
        grid = np.array([[1, 0], [1, 0]], dtype=bool)
        assert rle_encode(grid).counts == (0, 2, 2)

    @pytest.mark.slow
    def test_round_trip_random_masks(self):
        rng = np.random.default_rng(5)
        for _ in range(10_000):
            h = int(rng.integers(1, 254))
            w = int(rng.integers(1, 258))
            grid = rng.random((h, w)) < rng.random()
            mask = rle_encode(grid)
            assert mask.area == int(grid.sum())
            np.testing.assert_array_equal(rle_decode(mask), grid)

    def test_indices_match_decode(self):
        grid = np.random.default_rng(2).random((13, 9)) < 0.4
        mask = rle_encode(grid)
        assert mask.indices().tolist() == np.flatnonzero(grid.ravel(order="F")).tolist()
        assert rle_from_indices(mask.indices(), 9, 13) == mask

    def test_all_background(self):
        mask = rle_encode(np.zeros((3, 4), dtype=bool))
        assert mask.counts == (12,)
        assert mask.foreground_bbox() is None

    @pytest.mark.parametrize("counts", [(3, 0, 1), (2, -1, 3), (1, 1)])
    def test_invalid_counts(self, counts):
        with pytest.raises(RleError):
            RleMask(2, 2, counts)

    def test_coco_round_trip_and_string_counts(self):
        mask = rle_encode(np.eye(3, dtype=bool))
        assert RleMask.from_coco(mask.to_coco()) == mask
        with pytest.raises(RleError, match="Compressed"):
            RleMask.from_coco({"size": [3, 3], "counts": "abc"})

    def test_patch_placement_and_window(self):
        patch = np.array([[1, 1, 0], [0, 1, 1]], dtype=bool)
        mask = rle_from_patch(patch, 4, 1, 10, 6)
        full = rle_decode(mask)
        assert full.sum() == 4
        np.testing.assert_array_equal(full[1:3, 4:7], patch)
        np.testing.assert_array_equal(rle_patch(mask, 4, 1, 3, 2), patch)

    def test_patch_outside_frame(self):
        with pytest.raises(RleError):
            rle_from_patch(np.ones((2, 2), dtype=bool), 9, 0, 10, 6)

    def test_foreground_bbox(self):
        grid = np.zeros((8, 8), dtype=bool)
        grid[2:5, 3:7] = True
        assert rle_encode(grid).foreground_bbox() == (3, 2, 4, 3)


class TestIou:
    def test_mask_iou(self):
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[:, :2] = True
        b[:, 1:3] = True
        assert mask_iou(rle_encode(a), rle_encode(b)) == pytest.approx(4 / 12)

    def test_dimension_mismatch(self):
        with pytest.raises(RleError, match="mismatch"):
            mask_iou(rle_encode(np.ones((2, 2))), rle_encode(np.ones((3, 2))))

    def test_both_empty(self):
        empty = rle_encode(np.zeros((2, 2)))
        assert mask_iou(empty, empty) == 0.0

    def test_agrees_with_per_pixel_count(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            h, w = (int(v) for v in rng.integers(1, 20, size=2))
            a = rng.random((h, w)) < 0.4
            b = rng.random((h, w)) < 0.4
            union = int((a | b).sum())
            expected = (a & b).sum() / union if union else 0.0
            ab = mask_iou(rle_encode(a), rle_encode(b))
            assert ab == pytest.approx(expected)
            assert ab == mask_iou(rle_encode(b), rle_encode(a))
            assert 0.0 <= ab <= 1.0
            if a.any():
                assert mask_iou(rle_encode(a), rle_encode(a)) == 1.0

    def test_bbox_iou(self):
        assert bbox_iou((0, 0, 10, 10), (5, 0, 10, 10)) == pytest.approx(50 / 150)
        assert bbox_iou((0, 0, 5, 5), (5, 5, 5, 5)) == 0.0


def _det(tile_id, bbox, score=0.9, size=(64, 64)):
    x, y, w, h = bbox
    return Detection(tile_id, bbox, score, 1, rle_from_patch(np.ones((h, w), dtype=bool), x, y, *size))


class TestDetection:
    def test_valid(self):
        _det("t", (3, 4, 5, 6)).validate(64, 64)

    def test_box_within_one_pixel_of_mask(self):
        det = Detection("t", (2, 4, 6, 6), 0.5, 1, _det("t", (3, 4, 5, 6)).mask)
        det.validate(64, 64)

    @pytest.mark.parametrize(
        "bbox, score, message",
        [
            ((3, 4, 0, 6), 0.5, "positive"),
            ((60, 4, 10, 6), 0.5, "leaves"),
            ((3, 4, 5, 6), 1.5, "score"),
            ((10, 20, 5, 6), 0.5, "does not match"),
            ((float("nan"), 4, 5, 6), 0.5, "finite"),
            ((3, 4, float("inf"), 6), 0.5, "finite"),
            ((3, 4, 5, 6), float("nan"), "finite"),
        ],
    )
    def test_invalid(self, bbox, score, message):
        det = Detection("t", bbox, score, 1, _det("t", (3, 4, 5, 6)).mask)
        with pytest.raises(DetectionFormatError, match=message):
            det.validate(64, 64)

    def test_mask_size_must_match_tile(self):
        with pytest.raises(DetectionFormatError, match="mask is"):
            _det("t", (3, 4, 5, 6), size=(32, 64)).validate(64, 64)


class TestCrop:
    def test_instance_inside_tile(self, small_params, make_rect):
        tile = compute_tile_grid(150, 100, small_params).tiles[1]  # origin (48, 0)
        det = crop_instance(make_rect(1, 60, 10, 8, 8), tile)
        assert det.bbox == (12.0, 10.0, 8.0, 8.0)
        assert det.mask.area == 64

    def test_fragment_starts_at_tile_edge(self, small_params, make_rect):
        tile = compute_tile_grid(150, 100, small_params).tiles[1]
        det = crop_instance(make_rect(1, 40, 10, 20, 5), tile)
        assert det.bbox == (0.0, 10.0, 12.0, 5.0)

    def test_shift_moves_object(self, small_params, make_rect):
        tile = compute_tile_grid(150, 100, small_params).tiles[0]
        det = crop_instance(make_rect(1, 10, 10, 4, 4), tile, shift=(2, -3), score=0.4)
        assert det.bbox == (12.0, 7.0, 4.0, 4.0)
        assert det.score == 0.4

    def test_disjoint(self, small_params, make_rect):
        tile = compute_tile_grid(150, 100, small_params).tiles[0]
        assert crop_instance(make_rect(1, 100, 80, 4, 4), tile) is None


class TestInstanceSet:
    def test_duplicate_ids(self, make_rect):
        with pytest.raises(DetectionFormatError, match="duplicate"):
            InstanceSet("img", 50, 50, (make_rect(1, 0, 0, 2, 2), make_rect(1, 5, 5, 2, 2)))

    def test_bbox_outside_image(self, make_rect):
        with pytest.raises(DetectionFormatError, match="leaves"):
            InstanceSet("img", 10, 10, (make_rect(1, 8, 8, 4, 4),))

    def test_non_finite_bbox(self, make_rect):
        inst = make_rect(1, 0, 0, 2, 2)
        bad = GlobalInstance(1, (float("nan"), 0, 2, 2), 1.0, 1, inst.mask, 0, 0)
        with pytest.raises(DetectionFormatError, match="non-finite"):
            InstanceSet("img", 10, 10, (bad,))

    def test_record_round_trip(self, make_rect):
        inst = make_rect(3, 5, 6, 4, 2, score=0.75)
        record = inst.to_record("img", 20, 10)
        assert record["segmentation"]["size"] == [10, 20]
        back = GlobalInstance.from_record(record, 20, 10)
        assert back == inst

    def test_record_size_mismatch(self, make_rect):
        record = make_rect(1, 0, 0, 2, 2).to_record("img", 20, 10)
        with pytest.raises(DetectionFormatError, match="does not match"):
            GlobalInstance.from_record(record, 30, 10)


class TestDetectionFile:
    def test_write_then_parse_groups_in_grid_order(self, tmp_path, small_params):
        grid = compute_tile_grid(150, 100, small_params, image_id="img")
        per_tile = {
            "img_r001_c000": [_det("img_r001_c000", (1, 1, 3, 3), size=(64, 52))],
            "img_r000_c000": [_det("img_r000_c000", (5, 5, 3, 3)), _det("img_r000_c000", (9, 9, 3, 3), 0.2)],
        }
        path = tmp_path / "dets.jsonl"
        assert write_detections(path, per_tile) == 3
        parsed = parse_detections(path, grid)
        assert list(parsed) == ["img_r000_c000", "img_r001_c000"]
        assert [d.score for d in parsed["img_r000_c000"]] == [0.9, 0.2]

    def test_unknown_tile_reports_record_and_line(self, tmp_path, small_params):
        grid = compute_tile_grid(150, 100, small_params, image_id="img")
        good = _det("img_r000_c000", (5, 5, 3, 3)).to_record()
        bad = dict(good, tile_id="elsewhere")
        path = tmp_path / "dets.jsonl"
        path.write_text(json.dumps(good) + "\n\n" + json.dumps(bad) + "\n")
        with pytest.raises(DetectionFormatError, match=r"record 1 \(line 3\): unknown tile_id 'elsewhere'"):
            parse_detections(path, grid)

    def test_missing_field(self, tmp_path, small_params):
        grid = compute_tile_grid(150, 100, small_params, image_id="img")
        record = _det("img_r000_c000", (5, 5, 3, 3)).to_record()
        del record["score"]
        path = tmp_path / "dets.jsonl"
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(DetectionFormatError, match="record 0"):
            parse_detections(path, grid)

    def test_nan_bbox_rejected(self, tmp_path, small_params):
        grid = compute_tile_grid(150, 100, small_params, image_id="img")
        record = _det("img_r000_c000", (5, 5, 3, 3)).to_record()
        record["bbox"][0] = float("nan")
        path = tmp_path / "dets.jsonl"
        path.write_text(json.dumps(record) + "\n")
        assert "NaN" in path.read_text()
        with pytest.raises(DetectionFormatError, match=r"record 0 \(line 1\): .*finite"):
            parse_detections(path, grid)

    def test_invalid_json(self, tmp_path, small_params):
        grid = compute_tile_grid(150, 100, small_params)
        path = tmp_path / "dets.jsonl"
        path.write_text("{not json\n")
        with pytest.raises(DetectionFormatError, match="invalid JSON"):
            parse_detections(path, grid)
