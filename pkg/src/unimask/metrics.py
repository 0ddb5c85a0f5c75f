"""Panoptic quality, mean IoU and COCO-style mask AP."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import SegmentGT, rle_decode
from .errors import MissingGTMasks, ShapeMismatch, VocabularyMismatch
from .postprocess import SEMANTIC_VOID, VOID, InstanceOutput, PanopticOutput, SemanticOutput

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


@dataclass
class MetricReport:
    metric: str
    overall: float
    per_class: dict[int, float]
    counts: tuple[int, int, int] | None = None
    extras: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "metric": self.metric,
            "overall": self.overall,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "counts": list(self.counts) if self.counts is not None else None,
        }

    @classmethod
    def from_json(cls, obj) -> MetricReport:
        counts = obj.get("counts")
        return cls(
            obj["metric"],
            float(obj["overall"]),
            {int(k): float(v) for k, v in obj["per_class"].items()},
            tuple(counts) if counts is not None else None,
        )


def _mean(values) -> float:
    # correctly rounded, so the result does not depend on class order
    values = list(values)
    return math.fsum(values) / len(values) if values else 0.0


# -- panoptic quality -------------------------------------------------------------


def _pq_image(pred: PanopticOutput, gt: PanopticOutput, stats, categories):
    if pred.segment_map.shape != gt.segment_map.shape:
        raise ShapeMismatch(f"{pred.segment_map.shape} vs {gt.segment_map.shape}")
    gt_cat = {s.id: s.category_id for s in gt.segments}
    pred_cat = {s.id: s.category_id for s in pred.segments}
    if categories is not None:
        unknown = {c for c in list(gt_cat.values()) + list(pred_cat.values()) if c not in categories}
        if unknown:
            raise VocabularyMismatch(f"categories {sorted(unknown)} outside the vocabulary")

    g = gt.segment_map.ravel().astype(np.int64)
    p = pred.segment_map.ravel().astype(np.int64)
    base = int(p.max()) + 1
    keys, cnt = np.unique(g * base + p, return_counts=True)
    inter = {(int(k // base), int(k % base)): int(n) for k, n in zip(keys, cnt)}

    gt_area = defaultdict(int)
    pred_area = defaultdict(int)  # pixels of the prediction outside GT void
    pred_on_void = defaultdict(int)
    pred_total = defaultdict(int)
    for (gi, pi), n in inter.items():
        gt_area[gi] += n
        pred_total[pi] += n
        if gi == VOID:
            pred_on_void[pi] += n
        else:
            pred_area[pi] += n

    matched_gt, matched_pred = set(), set()
    for (gi, pi), n in inter.items():
        if gi == VOID or pi == VOID or gi not in gt_cat or pi not in pred_cat:
            continue
        if gt_cat[gi] != pred_cat[pi]:
            continue
        iou = n / (gt_area[gi] + pred_area[pi] - n)
        if iou > 0.5:
            c = gt_cat[gi]
            stats[c]["ious"].append(iou)
            stats[c]["tp"] += 1
            matched_gt.add(gi)
            matched_pred.add(pi)
    for gi, c in gt_cat.items():
        if gi not in matched_gt:
            stats[c]["fn"] += 1
    for pi, c in pred_cat.items():
        if pi in matched_pred:
            continue
        # predictions lying mostly on void are not counted as false positives
        if pred_total[pi] and pred_on_void[pi] / pred_total[pi] > 0.5:
            continue
        stats[c]["fp"] += 1


def panoptic_quality(
    pairs: Iterable[tuple[PanopticOutput, PanopticOutput]],
    categories: Iterable[int] | None = None,
    things: Iterable[int] | None = None,
) -> MetricReport:
    """PQ over ``(prediction, ground truth)`` image pairs.

    A prediction and a GT segment of the same class match when IoU > 0.5,
    where IoU ignores prediction pixels that fall on GT void. Overall PQ is
    the mean over classes with at least one TP, FP or FN.
    """
    cats = set(categories) if categories is not None else None
    stats = defaultdict(lambda: {"ious": [], "tp": 0, "fp": 0, "fn": 0})
    for pred, gt in pairs:
        _pq_image(pred, gt, stats, cats)
    per_class, sq, rq = {}, {}, {}
    for c, s in sorted(stats.items()):
        denom = s["tp"] + 0.5 * s["fp"] + 0.5 * s["fn"]
        if denom == 0:
            continue
        iou_sum = math.fsum(s["ious"])
        per_class[c] = iou_sum / denom
        sq[c] = iou_sum / s["tp"] if s["tp"] else 0.0
        rq[c] = s["tp"] / denom
    tp = sum(s["tp"] for s in stats.values())
    fp = sum(s["fp"] for s in stats.values())
    fn = sum(s["fn"] for s in stats.values())
    extras = {"SQ": _mean(sq.values()), "RQ": _mean(rq.values())}
    if things is not None:
        things = set(things)
        extras["PQ_th"] = _mean(v for c, v in per_class.items() if c in things)
        extras["PQ_st"] = _mean(v for c, v in per_class.items() if c not in things)
    return MetricReport("PQ", _mean(per_class.values()), per_class, (tp, fp, fn), extras)


# -- mean IoU -----------------------------------------------------------------------


def mean_iou(pairs: Iterable[tuple[SemanticOutput, SemanticOutput]]) -> MetricReport:
    """Dataset-wide per-class IoU averaged over classes present in the GT."""
    inter = defaultdict(int)
    union = defaultdict(int)
    in_gt = defaultdict(int)
    for pred, gt in pairs:
        p, g = np.asarray(pred.label_map), np.asarray(gt.label_map)
        if p.shape != g.shape:
            raise ShapeMismatch(f"prediction {p.shape} vs GT {g.shape}")
        valid = g != SEMANTIC_VOID
        p, g = p[valid], g[valid]
        for c in np.union1d(np.unique(p), np.unique(g)):
            c = int(c)
            if c == SEMANTIC_VOID:
                continue
            pc, gc = p == c, g == c
            inter[c] += int((pc & gc).sum())
            union[c] += int((pc | gc).sum())
            in_gt[c] += int(gc.sum())
    per_class = {c: inter[c] / union[c] for c in sorted(in_gt) if in_gt[c] > 0}
    return MetricReport("mIoU", _mean(per_class.values()), per_class)


# -- mask AP ------------------------------------------------------------------------


def _flat_masks(masks, hw):
    if not masks:
        return np.zeros((0, hw[0] * hw[1]), dtype=np.float64)
    return np.stack([np.asarray(m, dtype=np.float64).ravel() for m in masks])


def _mask_ious(dets: np.ndarray, gts: np.ndarray) -> np.ndarray:
    inter = dets @ gts.T
    union = dets.sum(1)[:, None] + gts.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def _evaluate_image(scores, ious, gt_ignore, threshold):
    """Greedy COCO matching for one image/class/threshold.

    Returns (matched, ignored) flags per detection in the given (score-sorted)
    order. Ignore-flagged GT may absorb any number of detections.
    """
    order = np.argsort([1 if ig else 0 for ig in gt_ignore], kind="stable")
    gt_taken = np.zeros(len(gt_ignore), dtype=bool)
    matched = np.zeros(len(scores), dtype=bool)
    ignored = np.zeros(len(scores), dtype=bool)
    for d in range(len(scores)):
        best = min(threshold, 1 - 1e-10)
        m = -1
        for gi in order:
            if gt_taken[gi] and not gt_ignore[gi]:
                continue
            if m > -1 and not gt_ignore[m] and gt_ignore[gi]:
                break
            if ious[d, gi] < best:
                continue
            best = ious[d, gi]
            m = gi
        if m == -1:
            continue
        matched[d] = True
        ignored[d] = gt_ignore[m]
        gt_taken[m] = True
    return matched, ignored


def _average_precision(scores, matched, ignored, num_gt) -> float:
    keep = ~ignored
    scores, matched = np.asarray(scores)[keep], np.asarray(matched)[keep]
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="mergesort")
    tp = np.cumsum(matched[order])
    fp = np.cumsum(~matched[order])
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    # precision envelope, then sample at fixed recall points
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def mask_ap(
    preds: Sequence[InstanceOutput],
    gts: Sequence[Sequence[SegmentGT]],
    max_dets: int = MAX_DETS,
) -> MetricReport:
    """COCO mask AP averaged over IoU thresholds 0.50:0.05:0.95.

    Per image and class, at most ``max_dets`` top-scoring detections are used.
    Detections matched to an ignore-flagged GT are dropped from scoring.
    """
    if len(preds) != len(gts):
        raise ShapeMismatch(f"{len(preds)} prediction images vs {len(gts)} GT images")
    # per class: list over images of (scores, iou matrix, gt_ignore)
    per_class_images = defaultdict(list)
    num_gt = defaultdict(int)
    for pred, gt_list in zip(preds, gts):
        if any(g.mask is None for g in gt_list):
            raise MissingGTMasks("mask AP needs GT masks for every segment")
        cats = {g.category_id for g in gt_list} | {d.category_id for d in pred.instances}
        for c in cats:
            g_c = [g for g in gt_list if g.category_id == c]
            d_c = [d for d in pred.instances if d.category_id == c]
            num_gt[c] += sum(1 for g in g_c if not g.ignore)
            d_scores = np.array([d.score for d in d_c], dtype=np.float64)
            order = np.argsort(-d_scores, kind="mergesort")[:max_dets]
            d_c = [d_c[i] for i in order]
            hw = (d_c[0].mask.height, d_c[0].mask.width) if d_c else (g_c[0].mask.height, g_c[0].mask.width)
            dm = _flat_masks([rle_decode(d.mask) for d in d_c], hw)
            gm = _flat_masks([g.dense_mask for g in g_c], hw)
            if dm.shape[1] != gm.shape[1] and len(d_c) and len(g_c):
                raise ShapeMismatch("detection and GT masks differ in size")
            ious = _mask_ious(dm, gm) if len(d_c) and len(g_c) else np.zeros((len(d_c), len(g_c)))
            per_class_images[c].append(
                ([d.score for d in d_c], ious, [g.ignore for g in g_c])
            )

    per_class, per_threshold = {}, defaultdict(list)
    for c in sorted(per_class_images):
        if num_gt[c] == 0:
            continue
        aps = []
        for t in IOU_THRESHOLDS:
            scores, matched, ignored = [], [], []
            for s, ious, ig in per_class_images[c]:
                m, i = _evaluate_image(s, ious, ig, t)
                scores.extend(s)
                matched.extend(m)
                ignored.extend(i)
            ap = _average_precision(
                np.array(scores, dtype=np.float64),
                np.array(matched, dtype=bool),
                np.array(ignored, dtype=bool),
                num_gt[c],
            )
            aps.append(ap)
            per_threshold[t].append(ap)
        per_class[c] = float(np.mean(aps))
    extras = {f"AP{int(round(t * 100))}": _mean(v) for t, v in per_threshold.items() if t in (0.5, 0.75)}
    return MetricReport("maskAP", _mean(per_class.values()), per_class, None, extras)
