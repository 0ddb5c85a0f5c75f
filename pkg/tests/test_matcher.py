import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linear_sum_assignment
from scipy.special import softmax

from oracles import brute_force_assignment
from unimask.core import DatasetSpec, LossWeights, ProposalSet, SegmentGT
from unimask.errors import MissingSupervision, ShapeMismatch, TooFewPredictions
from unimask.losses import dice_loss
from unimask.matcher import cost_matrix, hungarian, match
from unimask.merge import apply_task_merge

NAMES = {1: "a", 2: "b", 3: "c"}
PANOPTIC_COSTS = LossWeights(1, 0, 1, 0)


def spec_with_costs(costs, task="instance_mask"):
    return DatasetSpec("d", (1, 2, 3), (), NAMES, task, LossWeights(1, 1, 1, 0), costs)


def cost_matrices(max_p=7, max_g=7, integer=False):
    elements = st.integers(-5, 5).map(float) if integer else st.floats(-100, 100, allow_nan=False)
    return st.integers(0, max_g).flatmap(
        lambda g: st.integers(max(g, 1), max_p).flatmap(lambda p: arrays(np.float64, (p, g), elements=elements))
    )


# -- hungarian --------------------------------------------------------------------------


def test_single_entry():
    a = hungarian([[3.5]])
    assert a.pairs == ((0, 0),) and a.total_cost == 3.5 and a.unmatched_predictions == ()


def test_two_by_two_takes_anti_diagonal():
    a = hungarian([[1, 2], [2, 4]])
    assert set(a.pairs) == {(0, 1), (1, 0)}
    assert a.total_cost == 4.0


def test_too_few_predictions():
    with pytest.raises(TooFewPredictions):
        hungarian(np.zeros((2, 3)))


def test_rejects_bad_input():
    with pytest.raises(ShapeMismatch):
        hungarian(np.zeros(3))
    with pytest.raises(ValueError):
        hungarian([[np.inf]])


def test_no_gt_leaves_all_unmatched():
    a = hungarian(np.zeros((3, 0)))
    assert a.pairs == () and a.unmatched_predictions == (0, 1, 2) and a.total_cost == 0.0


def test_all_ties_choose_identity():
    assert hungarian(np.ones((4, 3))).pairs == ((0, 0), (1, 1), (2, 2))


@pytest.mark.parametrize("seed", range(10))
def test_random_six_by_six_matches_exhaustive_search(seed):
    c = np.random.default_rng(seed).normal(size=(6, 6))
    total, perm = brute_force_assignment(c)
    a = hungarian(c)
    assert a.total_cost == total
    assert tuple(p for p, _ in a.pairs) == perm


@given(cost_matrices())
def test_optimal_against_brute_force(c):
    total, _ = brute_force_assignment(c)
    a = hungarian(c)
    assert abs(a.total_cost - total) <= 1e-9 * (1 + np.abs(c).sum())


@given(cost_matrices(max_p=6, max_g=6, integer=True))
def test_ties_resolve_to_lexicographically_smallest(c):
    # integer costs make ties frequent and totals exact
    total, perm = brute_force_assignment(c)
    a = hungarian(c)
    assert a.total_cost == total
    assert tuple(p for p, _ in a.pairs) == perm


@given(cost_matrices(max_p=6, max_g=6, integer=True), st.integers(-20, 20))
def test_shift_leaves_pairs_unchanged(c, shift):
    # integer costs keep shifted sums exact, so near-ties cannot flip
    assert hungarian(c).pairs == hungarian(c + shift).pairs


@given(cost_matrices())
def test_result_is_partial_bijection(c):
    a = hungarian(c)
    P, G = c.shape
    preds = [p for p, _ in a.pairs]
    assert [g for _, g in a.pairs] == list(range(G))
    assert len(set(preds)) == G
    assert sorted(preds + list(a.unmatched_predictions)) == list(range(P))


@pytest.mark.parametrize("seed", range(5))
def test_agrees_with_scipy_on_larger_problems(seed):
    c = np.random.default_rng(seed).random((30, 20))
    rows, cols = linear_sum_assignment(c)
    assert abs(hungarian(c).total_cost - c[rows, cols].sum()) <= 1e-9


# -- cost matrix -------------------------------------------------------------------------


def _gt(cat, box):
    x0, y0, x1, y1 = box
    m = np.zeros((6, 6), dtype=bool)
    m[y0:y1, x0:x1] = True
    return SegmentGT.from_mask(cat, m)


def test_perfect_pair_costs_minus_one():
    g = _gt(2, (1, 1, 4, 5))
    z = np.full((1, 4), -200.0)
    z[0, 1] = 200.0
    p = ProposalSet(np.where(g.dense_mask, 100.0, -100.0)[None], z)
    spec = spec_with_costs(PANOPTIC_COSTS)
    c = cost_matrix(apply_task_merge(p, spec), [g], spec)
    assert abs(c[0, 0] + 1.0) <= 1e-6


def test_single_entry_equals_hand_sum():
    rng = np.random.default_rng(4)
    g = _gt(3, (0, 2, 5, 6))
    p = ProposalSet(rng.normal(size=(1, 6, 6)), rng.normal(size=(1, 4)))
    spec = spec_with_costs(LossWeights(2.0, 0, 5.0, 0))
    c = cost_matrix(apply_task_merge(p, spec), [g], spec)
    by_hand = -2.0 * softmax(p.class_logits[0])[2] + 5.0 * dice_loss(p.mask_logits[0], g.dense_mask).value
    assert abs(c[0, 0] - by_hand) <= 1e-9


def test_zero_weight_terms_are_skipped():
    # box-only GT is fine when no mask term is weighted
    g = SegmentGT(1, None, (0, 0, 3, 3))
    p = ProposalSet(np.zeros((2, 6, 6)), np.zeros((2, 4)))
    spec = spec_with_costs(LossWeights(1, 0, 0, 0.5))
    assert cost_matrix(apply_task_merge(p, spec), [g], spec).shape == (2, 1)


def test_missing_supervision():
    p = ProposalSet(np.zeros((2, 6, 6)), np.zeros((2, 4)))
    spec = spec_with_costs(PANOPTIC_COSTS)
    with pytest.raises(MissingSupervision):
        cost_matrix(apply_task_merge(p, spec), [SegmentGT(1, None, (0, 0, 3, 3))], spec)
    spec = spec_with_costs(LossWeights(1, 0, 0, 1))
    with pytest.raises(MissingSupervision):
        cost_matrix(apply_task_merge(p, spec), [SegmentGT(1, _gt(1, (0, 0, 2, 2)).mask)], spec)


# -- match ---------------------------------------------------------------------------------


def test_match_skips_ignored_gt():
    gts = [_gt(1, (0, 0, 2, 2)), SegmentGT.from_mask(2, _gt(2, (3, 3, 6, 6)).dense_mask, ignore=True), _gt(3, (2, 0, 6, 2))]
    rng = np.random.default_rng(0)
    p = ProposalSet(rng.normal(size=(3, 6, 6)), rng.normal(size=(3, 4)))
    spec = spec_with_costs(PANOPTIC_COSTS)
    a = match(apply_task_merge(p, spec), gts, spec)
    assert [g for _, g in a.pairs] == [0, 2]
    assert len(a.unmatched_predictions) == 1 and a.dropped_gts == ()


def test_match_pads_when_gt_outnumber_predictions():
    gts = [_gt(1, (0, 0, 2, 2)), _gt(2, (3, 3, 6, 6)), _gt(3, (2, 0, 6, 2))]
    g1 = gts[1].dense_mask
    z = np.full((1, 4), -10.0)
    z[0, 1] = 10.0
    p = ProposalSet(np.where(g1, 50.0, -50.0)[None], z)
    spec = spec_with_costs(PANOPTIC_COSTS)
    a = match(apply_task_merge(p, spec), gts, spec)
    assert a.pairs == ((0, 1),)
    assert a.dropped_gts == (0, 2)
    assert a.unmatched_predictions == ()
