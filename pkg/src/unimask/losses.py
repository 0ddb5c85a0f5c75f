"""Training losses with analytic gradients.

Every loss returns a :class:`LossValue` whose gradients are taken with respect
to the *logits* it was given. The ``pairwise_*`` functions evaluate the same
losses for every (prediction, GT) pair at once and are what the matcher uses
for its cost matrix; they share the elementwise helpers below with the
single-pair losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, softmax

from .core import DatasetSpec, ProposalSet, SegmentGT
from .errors import EmptyBox, IndexOutOfRange, ShapeMismatch
from .merge import MergedOutput, merge_backward

DICE_SMOOTH = 1e-6
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
BACKGROUND_WEIGHT = 0.05
BACKGROUND = -1  # target marker for the trailing background entry


@dataclass
class LossValue:
    value: float
    grad_mask: np.ndarray | None = None
    grad_class: np.ndarray | None = None
    terms: dict = field(default_factory=dict)


def log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _check_same(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeMismatch(f"prediction shape {a.shape} != target shape {b.shape}")


# -- elementwise pieces ------------------------------------------------------


def focal_elementwise(x, positive: bool, gamma: float, alpha: float):
    """Per-pixel focal loss and its derivative, for an all-1 or all-0 target.

    Written in terms of the logit of the true label, ``xt = +x`` (target 1) or
    ``-x`` (target 0), so ``p_t = sigmoid(xt)``.
    """
    xt = x if positive else -x
    a_t = alpha if positive else 1.0 - alpha
    pt = expit(xt)
    log_pt = log_sigmoid(xt)
    one_m = 1.0 - pt
    mod = one_m**gamma
    loss = -a_t * mod * log_pt
    d_xt = a_t * mod * (gamma * pt * log_pt - one_m)
    return loss, (d_xt if positive else -d_xt)


def dice_from_probs(p: np.ndarray, g: np.ndarray, s: float = DICE_SMOOTH):
    """1-D dice loss on probabilities; returns (value, d value / d p)."""
    inter = float(np.dot(p, g))
    denom = float(p.sum() + g.sum()) + s
    num = 2.0 * inter + s
    value = 1.0 - num / denom
    grad = -(2.0 * g * denom - num) / denom**2
    return value, grad


def pairwise_dice_probs(p: np.ndarray, g: np.ndarray, s: float = DICE_SMOOTH) -> np.ndarray:
    """Dice loss between every row of ``p`` (P, L) and every row of ``g`` (G, L)."""
    inter = p @ g.T
    denom = p.sum(axis=1)[:, None] + g.sum(axis=1)[None, :] + s
    return 1.0 - (2.0 * inter + s) / denom


# -- mask losses -------------------------------------------------------------


def dice_loss(mask_logits, gt_mask, smooth: float = DICE_SMOOTH) -> LossValue:
    x = np.asarray(mask_logits, dtype=np.float64)
    g = np.asarray(gt_mask, dtype=np.float64)
    _check_same(x, g)
    p = expit(x)
    value, d_p = dice_from_probs(p.ravel(), g.ravel(), smooth)
    grad = d_p.reshape(x.shape) * p * (1.0 - p)
    return LossValue(value, grad_mask=grad)


def focal_bce_loss(
    mask_logits, gt_mask, gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA
) -> LossValue:
    """Focal binary cross-entropy averaged over pixels."""
    if gamma < 0 or not 0.0 <= alpha <= 1.0:
        raise ValueError("need gamma >= 0 and alpha in [0, 1]")
    x = np.asarray(mask_logits, dtype=np.float64)
    g = np.asarray(gt_mask).astype(bool)
    _check_same(x, g)
    l_pos, d_pos = focal_elementwise(x, True, gamma, alpha)
    l_neg, d_neg = focal_elementwise(x, False, gamma, alpha)
    n = x.size
    loss = np.where(g, l_pos, l_neg)
    grad = np.where(g, d_pos, d_neg) / n
    return LossValue(float(loss.sum() / n), grad_mask=grad)


def _box_profiles(box, height: int, width: int):
    x0, y0, x1, y1 = (int(v) for v in box)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, width), min(y1, height)
    if x1 <= x0 or y1 <= y0:
        raise EmptyBox(f"box {tuple(box)} is empty inside a {height}x{width} image")
    bx = np.zeros(width)
    by = np.zeros(height)
    bx[x0:x1] = 1.0
    by[y0:y1] = 1.0
    return bx, by


def projection_loss(mask_logits, box, smooth: float = DICE_SMOOTH) -> LossValue:
    """Dice between axis-wise max projections of the soft mask and of the box.

    The x projection is the per-column max over rows, the y projection the
    per-row max over columns. Gradients flow through the first maximal pixel.
    """
    x = np.asarray(mask_logits, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch(f"expected (H, W) logits, got {x.shape}")
    h, w = x.shape
    bx, by = _box_profiles(box, h, w)
    s = expit(x)
    rows_of_col_max = np.argmax(s, axis=0)
    cols_of_row_max = np.argmax(s, axis=1)
    px = s[rows_of_col_max, np.arange(w)]
    py = s[np.arange(h), cols_of_row_max]
    vx, dx = dice_from_probs(px, bx, smooth)
    vy, dy = dice_from_probs(py, by, smooth)
    d_s = np.zeros_like(s)
    np.add.at(d_s, (rows_of_col_max, np.arange(w)), dx)
    np.add.at(d_s, (np.arange(h), cols_of_row_max), dy)
    return LossValue(vx + vy, grad_mask=d_s * s * (1.0 - s), terms={"x": vx, "y": vy})


# -- classification -----------------------------------------------------------


def ce_class_loss(class_logits, target: int, background_weight: float = BACKGROUND_WEIGHT) -> LossValue:
    """Cross-entropy against ``target``; background targets are down-weighted.

    ``target`` is a class-logit index, or ``BACKGROUND`` for the trailing entry.
    """
    z = np.asarray(class_logits, dtype=np.float64)
    k1 = z.shape[-1]
    if target == BACKGROUND:
        target = k1 - 1
    if not 0 <= target < k1:
        raise IndexOutOfRange(f"target {target} outside 0..{k1 - 1}")
    w = background_weight if target == k1 - 1 else 1.0
    shifted = z - z.max()
    logp = shifted - np.log(np.exp(shifted).sum())
    grad = np.exp(logp)
    grad[target] -= 1.0
    return LossValue(float(-w * logp[target]), grad_class=w * grad)


# -- pairwise versions for matching costs ------------------------------------


def pairwise_class_prob(class_logits: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    return softmax(class_logits, axis=1)[:, list(targets)]


def pairwise_focal(
    mask_logits: np.ndarray, gt_masks: np.ndarray, gamma: float = FOCAL_GAMMA, alpha: float = FOCAL_ALPHA
) -> np.ndarray:
    """Mean focal loss of each of P flattened predictions against each of G masks."""
    x = mask_logits.reshape(len(mask_logits), -1)
    g = gt_masks.reshape(len(gt_masks), -1).astype(np.float64)
    l_pos, _ = focal_elementwise(x, True, gamma, alpha)
    l_neg, _ = focal_elementwise(x, False, gamma, alpha)
    return (l_pos @ g.T + l_neg @ (1.0 - g).T) / x.shape[1]


def pairwise_dice(mask_logits: np.ndarray, gt_masks: np.ndarray, smooth: float = DICE_SMOOTH) -> np.ndarray:
    p = expit(mask_logits.reshape(len(mask_logits), -1))
    g = gt_masks.reshape(len(gt_masks), -1).astype(np.float64)
    return pairwise_dice_probs(p, g, smooth)


def pairwise_projection(mask_logits: np.ndarray, boxes: Sequence, smooth: float = DICE_SMOOTH) -> np.ndarray:
    _, h, w = mask_logits.shape
    s = expit(mask_logits)
    px, py = s.max(axis=1), s.max(axis=2)
    profiles = [_box_profiles(b, h, w) for b in boxes]
    bx = np.stack([p[0] for p in profiles])
    by = np.stack([p[1] for p in profiles])
    return pairwise_dice_probs(px, bx, smooth) + pairwise_dice_probs(py, by, smooth)


# -- per-dataset total ----------------------------------------------------------


def pair_loss(mask_logits, class_logits, gt: SegmentGT, spec: DatasetSpec):
    """Weighted loss of one matched (entry, GT) pair.

    Returns ``(value, d/d mask_logits or None, d/d class_logits, terms)``.
    """
    lw = spec.loss_weights
    terms = {}
    ce = ce_class_loss(class_logits, spec.class_index(gt.category_id), spec.background_weight)
    value = lw.ce * ce.value
    g_class = lw.ce * ce.grad_class
    terms["ce"] = ce.value
    g_mask = None
    gt_mask = gt.dense_mask
    if gt_mask is not None and (lw.focal or lw.dice):
        g_mask = np.zeros_like(mask_logits)
        if lw.focal:
            f = focal_bce_loss(mask_logits, gt_mask, spec.focal_gamma, spec.focal_alpha)
            value += lw.focal * f.value
            g_mask += lw.focal * f.grad_mask
            terms["focal"] = f.value
        if lw.dice:
            d = dice_loss(mask_logits, gt_mask)
            value += lw.dice * d.value
            g_mask += lw.dice * d.grad_mask
            terms["dice"] = d.value
    if gt.box is not None and lw.proj:
        pr = projection_loss(mask_logits, gt.box)
        value += lw.proj * pr.value
        g_mask = lw.proj * pr.grad_mask if g_mask is None else g_mask + lw.proj * pr.grad_mask
        terms["proj"] = pr.value
    return value, g_mask, g_class, terms


def total_loss(
    proposals: ProposalSet,
    merged: MergedOutput,
    pairs: Sequence[tuple[int, int]],
    unmatched: Sequence[int],
    gts: Sequence[SegmentGT],
    spec: DatasetSpec,
) -> LossValue:
    """Sum of matched-pair losses plus background CE on unmatched entries.

    ``pairs`` index into ``merged.entries`` and ``gts``. Proposals that belong
    to no entry (``merged.background_only``) also take the background CE.
    Gradients are returned on the full proposal set.
    """
    lam_ce = spec.loss_weights.ce
    grads: list = [(None, None)] * len(merged.entries)
    value = 0.0
    terms = {"ce": 0.0, "focal": 0.0, "dice": 0.0, "proj": 0.0, "background": 0.0}
    for i, j in pairs:
        entry = merged.entries[i]
        v, g_mask, g_class, t = pair_loss(entry.mask_logits, entry.class_logits, gts[j], spec)
        value += v
        grads[i] = (g_mask, g_class)
        for key, val in t.items():
            terms[key] += val
    for i in unmatched:
        ce = ce_class_loss(merged.entries[i].class_logits, BACKGROUND, spec.background_weight)
        value += lam_ce * ce.value
        terms["background"] += ce.value
        grads[i] = (None, lam_ce * ce.grad_class)
    grad_mask, grad_class = merge_backward(grads, proposals, merged)
    for j in merged.background_only:
        ce = ce_class_loss(proposals.class_logits[j], BACKGROUND, spec.background_weight)
        value += lam_ce * ce.value
        terms["background"] += ce.value
        grad_class[j] += lam_ce * ce.grad_class
    return LossValue(float(value), grad_mask, grad_class, terms)
