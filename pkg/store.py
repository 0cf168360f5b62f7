"""
JSON persistence for tile manifests, annotation files and run reports
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Sequence, Union

from errors import DetectionFormatError, GridError
from instances import GlobalInstance, InstanceSet
from tiling import TileGrid

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def save_manifest(grid: TileGrid, path: PathLike) -> None:
    """Write the tile manifest"""
    Path(path).write_text(json.dumps(grid.to_manifest(), indent=2) + "\n")


def load_manifest(path: PathLike) -> TileGrid:
    """Read a tile manifest back into a grid"""
    try:
        manifest = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise GridError(f"Manifest {path} is not valid JSON: {e}") from e
    return TileGrid.from_manifest(manifest)


def save_annotations(path: PathLike, sets: Sequence[InstanceSet]) -> int:
    """Write instance sets as one annotation document; returns the record count.

    One annotation per line keeps full-image RLE counts readable while the
    file stays a single JSON document.
    """
    ordered = sorted(sets, key=lambda s: s.image_id)
    images = [{"image_id": s.image_id, "width": s.width, "height": s.height} for s in ordered]
    records = [rec for s in ordered for rec in s.to_records()]

    lines = ["{", f'  "images": {json.dumps(images)},', '  "annotations": [']
    lines.append(",\n".join("    " + json.dumps(rec) for rec in records))
    lines.append("  ]")
    lines.append("}")
    Path(path).write_text("\n".join(line for line in lines if line) + "\n")
    logger.info("Wrote %d annotations over %d images to %s", len(records), len(images), path)
    return len(records)


def _record_lines(path: PathLike, text: str) -> List[dict]:
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise DetectionFormatError(f"{path}: line {lineno}: invalid JSON: {e}") from e
        if not isinstance(record, dict):
            raise DetectionFormatError(f"{path}: line {lineno}: expected an annotation object")
        records.append(record)
    return records


def _size_from_segmentation(path: PathLike, i: int, record: dict) -> tuple:
    try:
        height, width = record["segmentation"]["size"]
        return int(width), int(height)
    except (KeyError, TypeError, ValueError) as e:
        raise DetectionFormatError(f"{path}: annotation {i} has no usable segmentation size") from e


def load_annotations(path: PathLike) -> List[InstanceSet]:
    """Read annotations into instance sets, sorted by image id.

    Accepts the document written by ``save_annotations`` or bare records, one
    per line. Without an ``images`` table, image sizes come from each
    record's ``segmentation.size``.
    """
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        doc = None

    dims: Dict[str, tuple] = {}
    if isinstance(doc, dict) and "annotations" in doc:
        records = doc["annotations"]
        images = doc.get("images")
        if not isinstance(records, list) or not all(isinstance(r, dict) for r in records):
            raise DetectionFormatError(f"{path}: 'annotations' must be a list of objects")
    else:
        records = _record_lines(path, text)
        images = None

    if images is not None:
        for image in images:
            try:
                dims[str(image["image_id"])] = (int(image["width"]), int(image["height"]))
            except (KeyError, TypeError, ValueError) as e:
                raise DetectionFormatError(f"{path}: malformed image entry {image!r}") from e
    else:
        for i, record in enumerate(records):
            if "image_id" not in record:
                raise DetectionFormatError(f"{path}: annotation {i} has no image_id")
            image_id = str(record["image_id"])
            size = _size_from_segmentation(path, i, record)
            if dims.setdefault(image_id, size) != size:
                raise DetectionFormatError(
                    f"{path}: annotation {i} gives image '{image_id}' size {size[0]}x{size[1]}, "
                    f"earlier records say {dims[image_id][0]}x{dims[image_id][1]}"
                )

    grouped: Dict[str, List[GlobalInstance]] = {image_id: [] for image_id in dims}
    for i, record in enumerate(records):
        image_id = str(record.get("image_id"))
        if image_id not in dims:
            raise DetectionFormatError(f"{path}: annotation {i} references unknown image '{image_id}'")
        width, height = dims[image_id]
        try:
            grouped[image_id].append(GlobalInstance.from_record(record, width, height))
        except (KeyError, TypeError, ValueError) as e:
            raise DetectionFormatError(f"{path}: annotation {i}: {e}") from e

    sets = [InstanceSet(image_id, *dims[image_id], tuple(grouped[image_id])) for image_id in sorted(dims)]
    logger.debug("Loaded %d images from %s", len(sets), path)
    return sets


def save_report(path: PathLike, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def load_report(path: PathLike) -> dict:
    return json.loads(Path(path).read_text())


def find_image(sets: Sequence[InstanceSet], image_id: str) -> InstanceSet:
    for s in sets:
        if s.image_id == image_id:
            return s
    raise DetectionFormatError(f"Annotation file holds no image '{image_id}'")
