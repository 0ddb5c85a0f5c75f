import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unimask.core import DatasetSpec, LossWeights, ProposalSet, SegmentGT, rle_encode
from unimask.errors import EmptyBox, IndexOutOfRange, ShapeMismatch
from unimask.gradcheck import numerical_grad, relative_error
from unimask.losses import (
    BACKGROUND,
    DICE_SMOOTH,
    ce_class_loss,
    dice_loss,
    focal_bce_loss,
    pairwise_dice,
    pairwise_focal,
    pairwise_projection,
    projection_loss,
    total_loss,
)
from unimask.matcher import match
from unimask.merge import apply_task_merge

HARD = 100.0
NAMES = {1: "a", 2: "b", 3: "c"}


def hard_logits(mask):
    return np.where(np.asarray(mask, dtype=bool), HARD, -HARD)


logit_grids = st.integers(1, 6).flatmap(
    lambda h: st.integers(1, 6).flatmap(
        lambda w: st.tuples(
            arrays(np.float64, (h, w), elements=st.floats(-8, 8)),
            arrays(np.bool_, (h, w)),
        )
    )
)


# -- dice -------------------------------------------------------------------------------


def test_dice_perfect_prediction():
    g = np.zeros((4, 4), dtype=bool)
    g[1:3, 1:3] = True
    assert dice_loss(hard_logits(g), g).value <= 1e-4


def test_dice_disjoint():
    g = np.zeros((4, 4), dtype=bool)
    g[0, :2] = True
    p = np.zeros((4, 4), dtype=bool)
    p[3, 2:] = True
    assert abs(dice_loss(hard_logits(p), g).value - 1.0) <= 1e-4


def test_dice_partial_overlap():
    g = np.zeros((4, 4), dtype=bool)
    g[0, :4] = True
    p = np.zeros((4, 4), dtype=bool)
    p[0, :2] = True
    assert abs(dice_loss(hard_logits(p), g).value - 1.0 / 3.0) <= 1e-6


def test_dice_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        dice_loss(np.zeros((2, 2)), np.zeros((2, 3)))


# -- focal ------------------------------------------------------------------------------


def test_focal_perfect_prediction():
    g = np.eye(4, dtype=bool)
    assert focal_bce_loss(hard_logits(g), g).value <= 1e-6


def test_focal_closed_form_single_pixel():
    v = focal_bce_loss(np.zeros((1, 1)), np.ones((1, 1)), gamma=2.0, alpha=0.25).value
    assert abs(v - 0.25 * 0.25 * math.log(2)) <= 1e-12
    assert abs(v - 0.04332) < 1e-5


@given(logit_grids)
def test_focal_without_focusing_is_half_bce(args):
    x, g = args
    p = 1 / (1 + np.exp(-x))
    bce = -(g * np.log(p) + (~g) * np.log(1 - p)).mean()
    assert abs(focal_bce_loss(x, g, gamma=0.0, alpha=0.5).value - 0.5 * bce) <= 1e-9 * max(1.0, bce)


def test_focal_rejects_bad_parameters():
    with pytest.raises(ValueError):
        focal_bce_loss(np.zeros((1, 1)), np.ones((1, 1)), gamma=-1)
    with pytest.raises(ValueError):
        focal_bce_loss(np.zeros((1, 1)), np.ones((1, 1)), alpha=1.5)


# -- cross-entropy ----------------------------------------------------------------------


@pytest.mark.parametrize("target", [0, 1, 2])
def test_ce_uniform(target):
    assert abs(ce_class_loss(np.zeros(4), target).value - math.log(4)) <= 1e-12


def test_ce_background_weight():
    assert abs(ce_class_loss(np.zeros(4), BACKGROUND).value - 0.05 * math.log(4)) <= 1e-12
    assert abs(ce_class_loss(np.zeros(4), 3).value - 0.05 * math.log(4)) <= 1e-12


def test_ce_confident():
    lv = ce_class_loss(np.array([10.0, 0.0, 0.0]), 0)
    assert abs(lv.value - math.log(1 + 2 * math.exp(-10))) <= 1e-15
    assert abs(lv.value - 9.08e-5) < 1e-7
    num, valid = numerical_grad(lambda z: ce_class_loss(z, 0).value, np.array([10.0, 0.0, 0.0]))
    assert relative_error(lv.grad_class, num, valid) <= 1e-4


def test_ce_index_out_of_range():
    with pytest.raises(IndexOutOfRange):
        ce_class_loss(np.zeros(3), 3)
    with pytest.raises(IndexOutOfRange):
        ce_class_loss(np.zeros(3), -2)


# -- projection -------------------------------------------------------------------------


def test_projection_box_fill():
    m = np.zeros((6, 6), dtype=bool)
    m[1:4, 2:5] = True
    assert projection_loss(hard_logits(m), (2, 1, 5, 4)).value <= 1e-4


def test_projection_whole_image_against_left_columns():
    lv = projection_loss(np.full((4, 4), HARD), (0, 0, 2, 4))
    assert abs(lv.terms["x"] - 1.0 / 3.0) <= 1e-6
    assert lv.terms["y"] <= 1e-6
    assert abs(lv.value - 1.0 / 3.0) <= 1e-6


def test_projection_hollow_rectangle_is_indistinguishable():
    m = np.zeros((8, 8), dtype=bool)
    m[1:7, 2:6] = True
    m[2:6, 3:5] = False
    assert projection_loss(hard_logits(m), (2, 1, 6, 7)).value <= 1e-4


def test_projection_empty_box():
    with pytest.raises(EmptyBox):
        projection_loss(np.zeros((4, 4)), (2, 2, 2, 3))
    with pytest.raises(EmptyBox):
        projection_loss(np.zeros((4, 4)), (5, 0, 7, 2))


@given(st.integers(0, 2**31 - 1))
def test_projection_zero_when_projections_agree(seed):
    """Any hard mask whose row/column footprint equals the box's has ~zero loss."""
    rng = np.random.default_rng(seed)
    h, w = rng.integers(2, 9, 2)
    x0, y0 = rng.integers(0, w - 1), rng.integers(0, h - 1)
    x1, y1 = rng.integers(x0 + 1, w + 1), rng.integers(y0 + 1, h + 1)
    m = np.zeros((h, w), dtype=bool)
    # a diagonal-ish path covering every row and column of the box
    rows, cols = np.arange(y0, y1), np.arange(x0, x1)
    n = max(len(rows), len(cols))
    m[rows[np.arange(n) * len(rows) // n], cols[np.arange(n) * len(cols) // n]] = True
    m[y0:y1, x0:x1] |= rng.random((y1 - y0, x1 - x0)) < 0.3
    assert projection_loss(hard_logits(m), (x0, y0, x1, y1)).value <= 1e-4


# -- properties -------------------------------------------------------------------------


@given(logit_grids)
def test_losses_are_bounded(args):
    x, g = args
    d = dice_loss(x, g).value
    assert 0.0 <= d <= 1.0 + DICE_SMOOTH
    assert focal_bce_loss(x, g).value >= 0.0
    h, w = x.shape
    pv = projection_loss(x, (0, 0, max(1, w // 2), h)).value
    assert 0.0 <= pv <= 2.0


@given(logit_grids, st.randoms(use_true_random=False))
def test_mask_losses_ignore_pixel_order(args, rnd):
    x, g = args
    order = list(range(x.size))
    rnd.shuffle(order)
    xs, gs = x.ravel()[order].reshape(x.shape), g.ravel()[order].reshape(g.shape)
    assert abs(dice_loss(x, g).value - dice_loss(xs, gs).value) <= 1e-12
    assert abs(focal_bce_loss(x, g).value - focal_bce_loss(xs, gs).value) <= 1e-12


@given(st.integers(0, 2**31 - 1))
def test_pairwise_costs_match_single_losses(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 2, (3, 5, 5))
    g = rng.random((2, 5, 5)) < 0.4
    boxes = [(0, 1, 3, 5), (2, 0, 5, 2)]
    pf, pd, pp = pairwise_focal(x, g), pairwise_dice(x, g), pairwise_projection(x, boxes)
    for i in range(3):
        for j in range(2):
            assert abs(pf[i, j] - focal_bce_loss(x[i], g[j]).value) <= 1e-12
            assert abs(pd[i, j] - dice_loss(x[i], g[j]).value) <= 1e-12
            assert abs(pp[i, j] - projection_loss(x[i], boxes[j]).value) <= 1e-12


@given(st.integers(0, 2**31 - 1))
def test_single_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 2, (5, 5))
    g = rng.random((5, 5)) < 0.5
    for fn in (lambda v: dice_loss(v, g), lambda v: focal_bce_loss(v, g, 1.5, 0.3)):
        num, valid = numerical_grad(lambda v: fn(v).value, x)
        assert relative_error(fn(x).grad_mask, num, valid) <= 1e-4


# -- total loss -------------------------------------------------------------------------


def test_total_semantic_perfect_prediction_leaves_background_terms():
    spec = DatasetSpec("ade-like", (1,), (2, 3), NAMES, "semantic", LossWeights(1, 20, 5, 0), LossWeights(1, 20, 5, 0))
    masks = [np.zeros((4, 4), dtype=bool) for _ in range(3)]
    masks[0][:, :1] = True
    masks[1][:, 1:3] = True
    masks[2][:, 3:] = True
    gts = [SegmentGT.from_mask(c, m) for c, m in zip((1, 2, 3), masks)]
    z = np.full((5, 4), -50.0)
    for j in range(3):
        z[j, j] = 50.0
    z[3, 3] = z[4, 3] = 50.0  # two background proposals
    m = np.stack([hard_logits(mk) for mk in masks] + [np.full((4, 4), -HARD)] * 2)
    p = ProposalSet(m, z)
    merged = apply_task_merge(p, spec)
    asg = match(merged, gts, spec)
    lv = total_loss(p, merged, asg.pairs, asg.unmatched_predictions, gts, spec)
    bg = sum(ce_class_loss(z[j], BACKGROUND).value for j in (3, 4))
    assert abs(lv.value - bg) <= 1e-4
    assert lv.terms["focal"] <= 1e-6 and lv.terms["dice"] <= 1e-6


def test_total_box_supervision_uses_ce_and_projection_only():
    spec = DatasetSpec("o365-like", (1, 2), (), NAMES, "instance_box", LossWeights(1, 0, 0, 2), LossWeights(1, 0, 0, 0.5))
    rng = np.random.default_rng(0)
    p = ProposalSet(rng.normal(size=(3, 6, 6)), rng.normal(size=(3, 3)))
    gts = [SegmentGT(1, None, (0, 0, 3, 3)), SegmentGT(2, None, (2, 2, 6, 5))]
    merged = apply_task_merge(p, spec)
    asg = match(merged, gts, spec)
    lv = total_loss(p, merged, asg.pairs, asg.unmatched_predictions, gts, spec)
    assert lv.terms["focal"] == 0.0 and lv.terms["dice"] == 0.0
    expected = 0.0
    for i, j in asg.pairs:
        expected += ce_class_loss(p.class_logits[i], spec.class_index(gts[j].category_id)).value
        expected += 2 * projection_loss(p.mask_logits[i], gts[j].box).value
    for i in asg.unmatched_predictions:
        expected += ce_class_loss(p.class_logits[i], BACKGROUND).value
    assert abs(lv.value - expected) <= 1e-9


def test_total_single_pair_equals_component_sum():
    spec = DatasetSpec("one", (1,), (), {1: "a"}, "instance_mask", LossWeights(1, 1, 1, 1), LossWeights(1, 1, 1, 1))
    rng = np.random.default_rng(1)
    m = rng.normal(size=(1, 5, 5))
    z = rng.normal(size=(1, 2))
    mask = np.zeros((5, 5), dtype=bool)
    mask[1:4, 0:3] = True
    gt = SegmentGT(1, rle_encode(mask), (0, 1, 3, 4))
    p = ProposalSet(m, z)
    lv = total_loss(p, apply_task_merge(p, spec), [(0, 0)], [], [gt], spec)
    by_hand = (
        ce_class_loss(z[0], 0).value
        + focal_bce_loss(m[0], mask).value
        + dice_loss(m[0], mask).value
        + projection_loss(m[0], (0, 1, 3, 4)).value
    )
    assert abs(lv.value - by_hand) <= 1e-9
