"""
Competition scoring: instance AP50, binary semantic mIoU, Score1 and Score2
"""
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from errors import MetricsError
from fusion import render_foreground
from instances import InstanceSet, indices_iou

logger = logging.getLogger(__name__)

IOU_THRESHOLD = 0.5


class ApInterpolation(Enum):
    ALL_POINTS = "allpoints"
    COCO101 = "coco101"


class MiouPooling(Enum):
    POOLED = "pooled"
    PER_IMAGE = "per-image"


@dataclass
class EvalReport:
    ap50: float
    miou: float
    score1: float
    tp: int
    fp: int
    fn: int
    num_gt: int
    num_pred: int
    iou_fg: float
    iou_bg: float
    confusion: Dict[str, int] = field(default_factory=dict)
    per_image_confusion: Dict[str, Dict[str, int]] = field(default_factory=dict)
    score2: Optional[float] = None
    subscores: Optional[Dict[str, float]] = None
    iou_rule: str = ">="
    ap_interpolation: str = ApInterpolation.ALL_POINTS.value
    miou_pooling: str = MiouPooling.POOLED.value

    def to_dict(self) -> dict:
        data = asdict(self)
        if self.score2 is None:
            data.pop("score2")
            data.pop("subscores")
        return data


@dataclass
class MatchResult:
    """Globally sorted predictions with their true-positive flags"""
    scores: np.ndarray
    tp: np.ndarray
    num_gt: int

    @property
    def num_tp(self) -> int:
        return int(self.tp.sum())

    @property
    def num_fp(self) -> int:
        return int(self.tp.size - self.tp.sum())


def _pair_sets(gt: Sequence[InstanceSet], pred: Sequence[InstanceSet]) -> List[Tuple[InstanceSet, InstanceSet]]:
    gt_by_id = {s.image_id: s for s in gt}
    pred_by_id = {s.image_id: s for s in pred}
    if len(gt_by_id) != len(gt) or len(pred_by_id) != len(pred):
        raise MetricsError("Duplicate image ids in evaluation input")
    if set(gt_by_id) != set(pred_by_id):
        missing = sorted(set(gt_by_id) ^ set(pred_by_id))
        raise MetricsError(f"Ground truth and predictions cover different images: {missing}")
    pairs = []
    for image_id in sorted(gt_by_id):
        g, p = gt_by_id[image_id], pred_by_id[image_id]
        if (g.width, g.height) != (p.width, p.height):
            raise MetricsError(
                f"{image_id}: ground truth is {g.width}x{g.height}, prediction is {p.width}x{p.height}"
            )
        pairs.append((g, p))
    return pairs


def _frames(instance_set: InstanceSet) -> np.ndarray:
    if not instance_set.instances:
        return np.zeros((0, 4), dtype=np.int64)
    return np.array([inst.frame for inst in instance_set.instances], dtype=np.int64)


def iou_table(gt: InstanceSet, pred: InstanceSet) -> np.ndarray:
    """Mask IoU of every (prediction, ground truth) pair in one image.

    Rows follow ``pred.instances``, columns ``gt.instances``; only pairs
    whose mask frames overlap are evaluated.
    """
    table = np.zeros((len(pred.instances), len(gt.instances)), dtype=np.float64)
    if table.size == 0:
        return table
    gf, pf = _frames(gt), _frames(pred)
    overlap = (
        (pf[:, None, 0] < gf[None, :, 0] + gf[None, :, 2])
        & (gf[None, :, 0] < pf[:, None, 0] + pf[:, None, 2])
        & (pf[:, None, 1] < gf[None, :, 1] + gf[None, :, 3])
        & (gf[None, :, 1] < pf[:, None, 1] + pf[:, None, 3])
    )
    gt_pixels = {}
    for i, p_inst in enumerate(pred.instances):
        cols = np.flatnonzero(overlap[i])
        if cols.size == 0:
            continue
        p_pixels = p_inst.pixel_indices(pred.height)
        for j in cols:
            if j not in gt_pixels:
                gt_pixels[j] = gt.instances[j].pixel_indices(gt.height)
            table[i, j] = indices_iou(p_pixels, gt_pixels[j])
    return table


def match_predictions(gt: Sequence[InstanceSet], pred: Sequence[InstanceSet],
                      iou_threshold: float = IOU_THRESHOLD, strict: bool = False,
                      threads: int = 1) -> MatchResult:
    """Greedy highest-IoU matching over the globally score-sorted predictions"""
    pairs = _pair_sets(gt, pred)
    num_gt = sum(len(g) for g, _ in pairs)
    if num_gt == 0:
        raise MetricsError("AP50 is undefined without ground-truth instances")

    # Columns sorted by ann id so argmax ties resolve to the lower id
    ordered_pairs = []
    for g, p in pairs:
        g_sorted = InstanceSet(g.image_id, g.width, g.height,
                               tuple(sorted(g.instances, key=lambda inst: inst.instance_id)))
        ordered_pairs.append((g_sorted, p))

    tables = Parallel(n_jobs=threads, backend="threading")(
        delayed(iou_table)(g, p) for g, p in ordered_pairs
    )

    entries = []
    for img, (g, p) in enumerate(ordered_pairs):
        for row, inst in enumerate(p.instances):
            entries.append((-inst.score, g.image_id, inst.instance_id, img, row))
    entries.sort()

    matched = [np.zeros(len(g), dtype=bool) for g, _ in ordered_pairs]
    tp = np.zeros(len(entries), dtype=bool)
    scores = np.zeros(len(entries), dtype=np.float64)
    for k, (neg_score, _, _, img, row) in enumerate(entries):
        scores[k] = -neg_score
        ious = tables[img][row]
        if ious.size == 0:
            continue
        candidates = np.where(matched[img], -1.0, ious)
        best = int(np.argmax(candidates))
        best_iou = candidates[best]
        hit = best_iou > iou_threshold if strict else best_iou >= iou_threshold
        if best_iou >= 0 and hit:
            tp[k] = True
            matched[img][best] = True
    return MatchResult(scores=scores, tp=tp, num_gt=num_gt)


def precision_recall(match: MatchResult) -> Tuple[np.ndarray, np.ndarray]:
    tp_cum = np.cumsum(match.tp)
    fp_cum = np.cumsum(~match.tp)
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1)
    recall = tp_cum / match.num_gt
    return precision, recall


def average_precision(precision: np.ndarray, recall: np.ndarray,
                      interpolation: ApInterpolation = ApInterpolation.ALL_POINTS) -> float:
    """Area under the precision envelope, as a fraction"""
    if precision.size == 0:
        return 0.0
    if interpolation is ApInterpolation.ALL_POINTS:
        mrec = np.concatenate(([0.0], recall, [1.0]))
        mpre = np.concatenate(([0.0], precision, [0.0]))
        mpre = np.maximum.accumulate(mpre[::-1])[::-1]
        steps = np.flatnonzero(mrec[1:] != mrec[:-1])
        return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))

    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    thresholds = np.linspace(0.0, 1.0, 101)
    inds = np.searchsorted(recall, thresholds, side="left")
    sampled = np.where(inds < envelope.size, envelope[np.minimum(inds, envelope.size - 1)], 0.0)
    return float(sampled.mean())


def ap50(gt: Sequence[InstanceSet], pred: Sequence[InstanceSet], strict: bool = False,
         interpolation: ApInterpolation = ApInterpolation.ALL_POINTS, threads: int = 1) -> float:
    """Instance-segmentation AP at mask IoU 0.5, in percent"""
    match = match_predictions(gt, pred, strict=strict, threads=threads)
    precision, recall = precision_recall(match)
    return 100.0 * average_precision(precision, recall, interpolation)


def _class_iou(inter: int, union: int) -> float:
    # A class absent from both ground truth and prediction scores 1
    return 1.0 if union == 0 else inter / union


def confusion_counts(gt_fg: np.ndarray, pred_fg: np.ndarray) -> Dict[str, int]:
    if gt_fg.shape != pred_fg.shape:
        raise MetricsError(f"Foreground shapes differ: {gt_fg.shape} vs {pred_fg.shape}")
    tp = int(np.count_nonzero(gt_fg & pred_fg))
    fp = int(np.count_nonzero(pred_fg)) - tp
    fn = int(np.count_nonzero(gt_fg)) - tp
    tn = gt_fg.size - tp - fp - fn
    return {"tp": tp, "fp": fp, "fn": fn, "tn": tn}


def class_ious(confusion: Mapping[str, int]) -> Tuple[float, float]:
    tp, fp, fn, tn = confusion["tp"], confusion["fp"], confusion["fn"], confusion["tn"]
    return _class_iou(tp, tp + fp + fn), _class_iou(tn, tn + fp + fn)


def _miou_parts(gt_fg_masks: Mapping[str, np.ndarray],
                pred: Sequence[InstanceSet]) -> Dict[str, Dict[str, int]]:
    """Pixel confusion counts per image, keyed by image id in sorted order"""
    pred_by_id = {s.image_id: s for s in pred}
    if set(gt_fg_masks) != set(pred_by_id):
        missing = sorted(set(gt_fg_masks) ^ set(pred_by_id))
        raise MetricsError(f"Ground truth and predictions cover different images: {missing}")
    parts: Dict[str, Dict[str, int]] = {}
    for image_id in sorted(gt_fg_masks):
        gt_fg = np.asarray(gt_fg_masks[image_id], dtype=bool)
        p = pred_by_id[image_id]
        if gt_fg.shape != (p.height, p.width):
            raise MetricsError(
                f"{image_id}: ground-truth mask is {gt_fg.shape[1]}x{gt_fg.shape[0]}, "
                f"prediction is {p.width}x{p.height}"
            )
        parts[image_id] = confusion_counts(gt_fg, render_foreground(p))
    return parts


def _pool(parts: Iterable[Mapping[str, int]]) -> Dict[str, int]:
    return {k: sum(p[k] for p in parts) for k in ("tp", "fp", "fn", "tn")}


def miou(gt_fg_masks: Mapping[str, np.ndarray], pred: Sequence[InstanceSet],
         pooling: MiouPooling = MiouPooling.POOLED) -> float:
    """Mean of foreground and background IoU, in percent"""
    parts = _miou_parts(gt_fg_masks, pred)
    if pooling is MiouPooling.POOLED:
        return 100.0 * float(np.mean(class_ious(_pool(parts.values()))))
    return 100.0 * float(np.mean([np.mean(class_ious(p)) for p in parts.values()]))


def foreground_masks(gt: Sequence[InstanceSet]) -> Dict[str, np.ndarray]:
    return {s.image_id: render_foreground(s) for s in gt}


def score1(ap50_value: float, miou_value: float) -> float:
    for name, value in (("ap50", ap50_value), ("miou", miou_value)):
        if not 0.0 <= value <= 100.0:
            raise MetricsError(f"{name} must be a percentage in [0, 100], got {value}")
    return 0.6 * ap50_value + 0.4 * miou_value


def score2(score1_value: float, eff: float, cod: float, doc: float) -> float:
    return 0.5 * score1_value + 0.3 * eff + 0.1 * cod + 0.1 * doc


def evaluate(gt: Sequence[InstanceSet], pred: Sequence[InstanceSet], strict: bool = False,
             interpolation: ApInterpolation = ApInterpolation.ALL_POINTS,
             pooling: MiouPooling = MiouPooling.POOLED,
             subscores: Optional[Mapping[str, float]] = None,
             threads: int = 1) -> EvalReport:
    """Full scoring pass; the report records every scoring convention it used"""
    match = match_predictions(gt, pred, strict=strict, threads=threads)
    precision, recall = precision_recall(match)
    ap = 100.0 * average_precision(precision, recall, interpolation)

    parts = _miou_parts(foreground_masks(gt), pred)
    pooled = _pool(parts.values())
    iou_fg, iou_bg = class_ious(pooled)
    if pooling is MiouPooling.POOLED:
        miou_value = 100.0 * (iou_fg + iou_bg) / 2
    else:
        miou_value = 100.0 * float(np.mean([np.mean(class_ious(p)) for p in parts.values()]))

    s1 = score1(ap, miou_value)
    s2 = None
    if subscores is not None:
        s2 = score2(s1, subscores["eff"], subscores["cod"], subscores["doc"])

    iou_rule = ">" if strict else ">="
    logger.info("AP50 %.3f (IoU %s %.1f, %s), mIoU %.3f (%s), Score1 %.3f",
                ap, iou_rule, IOU_THRESHOLD, interpolation.value, miou_value, pooling.value, s1)
    return EvalReport(
        ap50=ap,
        miou=miou_value,
        score1=s1,
        tp=match.num_tp,
        fp=match.num_fp,
        fn=match.num_gt - match.num_tp,
        num_gt=match.num_gt,
        num_pred=int(match.tp.size),
        iou_fg=iou_fg,
        iou_bg=iou_bg,
        confusion=pooled,
        per_image_confusion=parts,
        score2=s2,
        subscores=dict(subscores) if subscores is not None else None,
        iou_rule=iou_rule,
        ap_interpolation=interpolation.value,
        miou_pooling=pooling.value,
    )
