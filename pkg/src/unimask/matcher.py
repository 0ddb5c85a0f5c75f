"""Cost matrix between merged entries and GT segments, and the Hungarian solver."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import DatasetSpec, SegmentGT
from .errors import MissingSupervision, ShapeMismatch, TooFewPredictions
from .losses import pairwise_class_prob, pairwise_dice, pairwise_focal, pairwise_projection
from .merge import MergedOutput


@dataclass(frozen=True)
class Assignment:
    """Result of matching.

    ``pairs`` holds ``(prediction index, gt index)`` sorted by GT index.
    ``dropped_gts`` is only non-empty when :func:`match` had to pad because
    there were fewer predictions than GT segments.
    """

    pairs: tuple[tuple[int, int], ...]
    unmatched_predictions: tuple[int, ...]
    total_cost: float
    dropped_gts: tuple[int, ...] = field(default=())


def cost_matrix(merged: MergedOutput, gts: Sequence[SegmentGT], spec: DatasetSpec) -> np.ndarray:
    """P x G matching cost; ``gts`` should already exclude ignored segments."""
    P, G = len(merged.entries), len(gts)
    cost = np.zeros((P, G))
    if P == 0 or G == 0:
        return cost
    mu = spec.cost_weights
    masks = merged.mask_stack()
    if mu.ce:
        targets = [spec.class_index(g.category_id) for g in gts]
        cost -= mu.ce * pairwise_class_prob(merged.class_stack(), targets)
    if mu.focal or mu.dice:
        missing = [j for j, g in enumerate(gts) if g.mask is None]
        if missing:
            raise MissingSupervision(f"mask cost requested but GT {missing} have no mask")
        gt_masks = np.stack([g.dense_mask for g in gts])
        if gt_masks.shape[1:] != masks.shape[1:]:
            raise ShapeMismatch(f"GT masks {gt_masks.shape[1:]} vs predictions {masks.shape[1:]}")
        if mu.focal:
            cost += mu.focal * pairwise_focal(masks, gt_masks, spec.focal_gamma, spec.focal_alpha)
        if mu.dice:
            cost += mu.dice * pairwise_dice(masks, gt_masks)
    if mu.proj:
        missing = [j for j, g in enumerate(gts) if g.box is None]
        if missing:
            raise MissingSupervision(f"projection cost requested but GT {missing} have no box")
        cost += mu.proj * pairwise_projection(masks, [g.box for g in gts])
    return cost


# -- assignment -----------------------------------------------------------------


def _solve(a: list[list[float]], n: int, m: int):
    """Min-cost assignment of n rows into m >= n columns.

    Shortest augmenting paths with row/column potentials, O(n^2 m). Returns
    ``(col_of_row, u, v)`` where ``u``/``v`` are feasible duals (1-based).
    """
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)  # p[j]: row matched to column j (1-based, 0 = free)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = a[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = [0] * n
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row, u, v


def _restricted_optimum(a, rows, cols):
    sub = [[a[r][c] for c in cols] for r in rows]
    sel, _, _ = _solve(sub, len(rows), len(cols))
    picked = [cols[k] for k in sel]
    return sum(a[r][c] for r, c in zip(rows, picked)), picked


def hungarian(costs) -> Assignment:
    """Minimum-cost injective assignment of GT columns to prediction rows.

    Among optimal assignments (up to a tolerance of ~1e-9 relative to the
    cost scale) the one whose prediction indices, listed in GT order, are
    lexicographically smallest is returned.
    """
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2:
        raise ShapeMismatch(f"cost matrix must be 2-D, got {c.shape}")
    P, G = c.shape
    if P < G:
        raise TooFewPredictions(f"{P} predictions cannot cover {G} GT segments")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix must be finite")
    if G == 0:
        return Assignment((), tuple(range(P)), 0.0)

    a = c.T.tolist()  # rows = GT, columns = predictions
    pred_of_gt, u, v = _solve(a, G, P)
    best = sum(a[g][p] for g, p in enumerate(pred_of_gt))
    tol = 1e-9 * (1.0 + float(np.abs(c).max())) * G

    # walk GT in order and take the smallest prediction index that still
    # admits an optimal completion; reduced costs prune hopeless candidates
    fixed: list[int] = []
    fixed_cost = 0.0
    for g in range(G):
        used = set(fixed)
        chosen = pred_of_gt[g]
        for p in range(chosen):
            if p in used or a[g][p] - u[g + 1] - v[p + 1] > tol:
                continue
            rest_rows = list(range(g + 1, G))
            rest_cols = [q for q in range(P) if q not in used and q != p]
            rest_cost, rest_pick = _restricted_optimum(a, rest_rows, rest_cols) if rest_rows else (0.0, [])
            if fixed_cost + a[g][p] + rest_cost <= best + tol:
                chosen = p
                pred_of_gt = fixed + [p] + rest_pick
                break
        fixed.append(chosen)
        fixed_cost += a[g][chosen]

    total = 0.0
    for g, p in enumerate(fixed):
        total += a[g][p]
    taken = set(fixed)
    return Assignment(
        tuple((p, g) for g, p in enumerate(fixed)),
        tuple(q for q in range(P) if q not in taken),
        total,
    )


def match(merged: MergedOutput, gts: Sequence[SegmentGT], spec: DatasetSpec) -> Assignment:
    """Match merged entries to the non-ignored GT segments.

    GT indices in the result refer to positions in ``gts``. When there are
    more GT segments than entries, phantom predictions with a cost above
    every real entry absorb the excess; those GT end up in ``dropped_gts``.
    """
    keep = [j for j, g in enumerate(gts) if not g.ignore]
    active = [gts[j] for j in keep]
    cost = cost_matrix(merged, active, spec)
    P, G = cost.shape
    padded = cost
    if P < G:
        big = (float(np.abs(cost).max()) if cost.size else 0.0) * 2.0 + 1.0
        padded = np.vstack([cost, np.full((G - P, G), big)])
    result = hungarian(padded)
    pairs, dropped = [], []
    total = 0.0
    for p, g in result.pairs:
        if p < P:
            pairs.append((p, keep[g]))
            total += cost[p, g]
        else:
            dropped.append(keep[g])
    unmatched = tuple(q for q in result.unmatched_predictions if q < P)
    return Assignment(tuple(pairs), unmatched, total, tuple(dropped))
