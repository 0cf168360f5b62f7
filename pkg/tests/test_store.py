import json

import pytest

from errors import DetectionFormatError, GridError
from instances import InstanceSet
from store import (
    find_image,
    load_annotations,
    load_manifest,
    load_report,
    save_annotations,
    save_manifest,
    save_report,
)
from tiling import compute_tile_grid


class TestManifest:
    def test_round_trip(self, tmp_path, small_params):
        grid = compute_tile_grid(150, 100, small_params, image_id="img")
        save_manifest(grid, tmp_path / "tiles.json")
        assert load_manifest(tmp_path / "tiles.json").tiles == grid.tiles

    def test_not_json(self, tmp_path):
        path = tmp_path / "tiles.json"
        path.write_text("tiles: 6")
        with pytest.raises(GridError, match="not valid JSON"):
            load_manifest(path)


class TestAnnotations:
    def test_sets_come_back_sorted_by_image(self, tmp_path, make_set):
        b = make_set(30, 20, [(1, 1, 4, 4), (10, 5, 3, 3)], image_id="b")
        a = make_set(40, 40, [(0, 0, 2, 2)], image_id="a")
        path = tmp_path / "gt.json"
        assert save_annotations(path, [b, a]) == 3
        loaded = load_annotations(path)
        assert [s.image_id for s in loaded] == ["a", "b"]
        assert loaded[1].to_records() == b.to_records()

    def test_one_annotation_per_line(self, tmp_path, make_set):
        path = tmp_path / "gt.json"
        save_annotations(path, [make_set(30, 20, [(1, 1, 4, 4), (10, 5, 3, 3)])])
        lines = path.read_text().splitlines()
        assert sum('"segmentation"' in line for line in lines) == 2
        assert json.loads(path.read_text())["images"] == [{"image_id": "img", "width": 30, "height": 20}]

    def test_image_without_instances(self, tmp_path):
        path = tmp_path / "gt.json"
        save_annotations(path, [InstanceSet("empty", 8, 8, ())])
        loaded = load_annotations(path)
        assert len(loaded) == 1 and len(loaded[0]) == 0

    def test_unknown_image(self, tmp_path, make_set):
        path = tmp_path / "gt.json"
        save_annotations(path, [make_set(30, 20, [(1, 1, 4, 4)], image_id="a")])
        doc = json.loads(path.read_text())
        doc["annotations"][0]["image_id"] = "z"
        path.write_text(json.dumps(doc))
        with pytest.raises(DetectionFormatError, match="unknown image 'z'"):
            load_annotations(path)

    def test_one_record_per_line(self, tmp_path, make_set):
        a = make_set(30, 20, [(1, 1, 4, 4), (10, 5, 3, 3)], image_id="a")
        b = make_set(12, 9, [(2, 2, 3, 3)], image_id="b")
        path = tmp_path / "gt.jsonl"
        lines = [json.dumps(rec) for rec in b.to_records() + a.to_records()]
        path.write_text("\n".join(lines) + "\n")
        loaded = load_annotations(path)
        assert [(s.image_id, s.width, s.height) for s in loaded] == [("a", 30, 20), ("b", 12, 9)]
        assert loaded[0].to_records() == a.to_records()

    def test_single_record_file(self, tmp_path, make_set):
        record = make_set(30, 20, [(1, 1, 4, 4)], image_id="field").to_records()[0]
        path = tmp_path / "gt.json"
        path.write_text(json.dumps(record) + "\n")
        (loaded,) = load_annotations(path)
        assert (loaded.image_id, loaded.width, loaded.height, len(loaded)) == ("field", 30, 20, 1)

    def test_document_without_image_table(self, tmp_path, make_set):
        records = make_set(30, 20, [(1, 1, 4, 4)], image_id="a").to_records()
        path = tmp_path / "gt.json"
        path.write_text(json.dumps({"annotations": records}))
        assert load_annotations(path)[0].width == 30

    def test_conflicting_record_sizes(self, tmp_path, make_set):
        first = make_set(30, 20, [(1, 1, 4, 4)], image_id="a").to_records()[0]
        second = dict(make_set(31, 20, [(1, 1, 4, 4)], image_id="a").to_records()[0], ann_id=2)
        path = tmp_path / "gt.jsonl"
        path.write_text(json.dumps(first) + "\n" + json.dumps(second) + "\n")
        with pytest.raises(DetectionFormatError, match="earlier records say 30x20"):
            load_annotations(path)

    @pytest.mark.parametrize("text", ["[1, 2", "[]", '{"images": []}', '{"annotations": 3}'])
    def test_malformed_document(self, tmp_path, text):
        path = tmp_path / "gt.json"
        path.write_text(text)
        with pytest.raises(DetectionFormatError):
            load_annotations(path)

    def test_find_image(self, make_set):
        sets = [make_set(5, 5, [], image_id="a"), make_set(5, 5, [], image_id="b")]
        assert find_image(sets, "b").image_id == "b"
        with pytest.raises(DetectionFormatError, match="no image 'c'"):
            find_image(sets, "c")


def test_report_round_trip(tmp_path):
    report = {"eval": {"ap50": 51.5, "miou": 70.0}, "total_ms": 12.5}
    save_report(tmp_path / "report.json", report)
    assert load_report(tmp_path / "report.json") == report
