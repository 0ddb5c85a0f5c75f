"""Finite-difference checks of every analytic gradient in the package.

Coordinates whose perturbation changes a discrete selection (class argmax,
the winning member of a merged max, the pixel attaining a projection max) sit
on a kink of the loss; they are detected by comparing a "signature" of those
selections at ``x - h``, ``x`` and ``x + h`` and left out of the comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import DatasetSpec, LossWeights, ProposalSet, SegmentGT, mask_bbox, rle_encode
from .losses import ce_class_loss, dice_loss, focal_bce_loss, projection_loss, total_loss
from .matcher import match
from .merge import MERGED, apply_task_merge

STEP = 1e-4
TOLERANCE = 1e-4
# denominators below this fraction of the largest gradient entry are floored,
# so entries that are numerically zero are judged on an absolute scale
FLOOR = 1e-3


def numerical_grad(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    h: float = STEP,
    signature: Callable[[np.ndarray], bytes] | None = None,
):
    """Central differences of scalar ``f`` at ``x``.

    Returns ``(grad, valid)``; ``valid`` is False where ``signature`` changed
    under the perturbation (the gradient there is left at 0).
    """
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    valid = np.ones(x.shape, dtype=bool)
    base_sig = signature(x) if signature is not None else None
    flat, gflat, vflat = x.reshape(-1), grad.reshape(-1), valid.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        if signature is not None and signature(x) != base_sig:
            vflat[i] = False
            flat[i] = orig
            continue
        f_plus = f(x)
        flat[i] = orig - h
        if signature is not None and signature(x) != base_sig:
            vflat[i] = False
            flat[i] = orig
            continue
        f_minus = f(x)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2 * h)
    return grad, valid


def relative_error(analytic: np.ndarray, numeric: np.ndarray, valid: np.ndarray | None = None) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    if valid is not None:
        keep = np.ravel(valid)
        a, n = a[keep], n[keep]
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max())
    if scale == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR * scale)
    return float((np.abs(a - n) / denom).max())


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


@dataclass
class SuiteReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.results), default=0.0)

    def worst_by_check(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for r in self.results:
            out[r.name] = max(out.get(r.name, 0.0), r.max_rel_error)
        return out


def _result(name, analytic, numeric, valid):
    return CheckResult(name, relative_error(analytic, numeric, valid), int(valid.sum()), int((~valid).sum()))


# -- random problem builders ------------------------------------------------


def random_blob(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """A random nonempty rectangle-ish blob with a few pixels knocked out."""
    y0, x0 = rng.integers(0, h - 1), rng.integers(0, w - 1)
    y1, x1 = rng.integers(y0 + 1, h + 1), rng.integers(x0 + 1, w + 1)
    m = np.zeros((h, w), dtype=bool)
    m[y0:y1, x0:x1] = True
    m &= rng.random((h, w)) > 0.2
    if not m.any():
        m[y0, x0] = True
    return m


def random_spec(rng: np.random.Generator, task: str) -> DatasetSpec:
    names = {1: "alpha", 2: "beta", 3: "gamma", 4: "delta"}
    weights = LossWeights(*rng.uniform(0.5, 2.0, 4))
    if task == "semantic":
        weights = LossWeights(weights.ce, weights.focal, weights.dice, 0.0)
    elif task == "instance_box":
        weights = LossWeights(weights.ce, 0.0, 0.0, weights.proj)
    things, stuff = ((1, 2), (3, 4)) if task in ("panoptic", "semantic") else ((1, 2, 3, 4), ())
    return DatasetSpec(
        f"random-{task}", things, stuff, names, task,
        loss_weights=weights, cost_weights=weights,
        focal_gamma=float(rng.uniform(0, 3)), focal_alpha=float(rng.uniform(0.1, 0.9)),
        background_weight=float(rng.uniform(0.01, 0.5)),
    )


def random_gts(rng: np.random.Generator, spec: DatasetSpec, h: int, w: int, count: int) -> list[SegmentGT]:
    gts = []
    cats = list(spec.vocabulary)
    for _ in range(count):
        c = int(rng.choice(cats))
        m = random_blob(rng, h, w)
        if spec.task == "instance_box":
            gts.append(SegmentGT(c, None, mask_bbox(m)))
        elif spec.task in ("instance_mask", "panoptic"):
            gts.append(SegmentGT(c, rle_encode(m), mask_bbox(m)))
        else:
            gts.append(SegmentGT(c, rle_encode(m)))
    return gts


def _selection_signature(mask_logits: np.ndarray, class_logits: np.ndarray, spec: DatasetSpec) -> bytes:
    props = ProposalSet(mask_logits, class_logits)
    merged = apply_task_merge(props, spec)
    parts = [props.argmax.astype(np.int64).tobytes()]
    for e in merged.entries:
        if e.kind == MERGED and len(e.members) > 1:
            parts.append(np.argmax(props.mask_logits[list(e.members)], axis=0).tobytes())
        parts.append(np.argmax(e.mask_logits, axis=0).tobytes())
        parts.append(np.argmax(e.mask_logits, axis=1).tobytes())
    return b"|".join(parts)


# -- individual checks ------------------------------------------------------


def check_losses(rng: np.random.Generator, size: int = 8) -> list[CheckResult]:
    x = rng.normal(0, 2, (size, size))
    g = random_blob(rng, size, size)
    gamma, alpha = float(rng.uniform(0, 3)), float(rng.uniform(0.05, 0.95))
    box = mask_bbox(random_blob(rng, size, size))
    out = []

    num, valid = numerical_grad(lambda v: dice_loss(v, g).value, x)
    out.append(_result("dice", dice_loss(x, g).grad_mask, num, valid))

    num, valid = numerical_grad(lambda v: focal_bce_loss(v, g, gamma, alpha).value, x)
    out.append(_result("focal", focal_bce_loss(x, g, gamma, alpha).grad_mask, num, valid))

    def proj_sig(v):
        return np.argmax(v, axis=0).tobytes() + np.argmax(v, axis=1).tobytes()

    num, valid = numerical_grad(lambda v: projection_loss(v, box).value, x, signature=proj_sig)
    out.append(_result("projection", projection_loss(x, box).grad_mask, num, valid))

    z = rng.normal(0, 2, 5)
    target = int(rng.integers(-1, 5))
    bw = float(rng.uniform(0.01, 1))
    num, valid = numerical_grad(lambda v: ce_class_loss(v, target, bw).value, z)
    out.append(_result("cross_entropy", ce_class_loss(z, target, bw).grad_class, num, valid))
    return out


def check_total_loss(rng: np.random.Generator, size: int = 8, n: int = 6) -> list[CheckResult]:
    """total_loss through MERGE (and its backward) with the assignment frozen."""
    task = ("panoptic", "semantic", "instance_box", "instance_mask")[int(rng.integers(0, 4))]
    spec = random_spec(rng, task)
    m0 = rng.normal(0, 2, (n, size, size))
    z0 = rng.normal(0, 2, (n, spec.num_classes + 1))
    props = ProposalSet(m0, z0)
    merged = apply_task_merge(props, spec)
    gts = random_gts(rng, spec, size, size, int(rng.integers(1, max(2, len(merged.entries)) + 1)))
    asg = match(merged, gts, spec)
    pairs, unmatched = asg.pairs, asg.unmatched_predictions

    def loss(m, z):
        p = ProposalSet(m, z)
        return total_loss(p, apply_task_merge(p, spec), pairs, unmatched, gts, spec).value

    lv = total_loss(props, merged, pairs, unmatched, gts, spec)
    num_m, valid_m = numerical_grad(
        lambda v: loss(v, z0), m0, signature=lambda v: _selection_signature(v, z0, spec)
    )
    num_z, valid_z = numerical_grad(
        lambda v: loss(m0, v), z0, signature=lambda v: _selection_signature(m0, v, spec)
    )
    return [
        _result(f"total_loss[{task}].mask", lv.grad_mask, num_m, valid_m),
        _result(f"total_loss[{task}].class", lv.grad_class, num_z, valid_z),
    ]


def check_head(rng: np.random.Generator, size: int = 8) -> list[CheckResult]:
    """End to end: head parameters -> proposals -> MERGE -> total_loss."""
    from .cotrain.head import ToyHead
    from .cotrain.synth import FEATURE_DIM, SyntheticScene
    from .cotrain.train import scene_loss
    from .core import pseudo_embeddings

    task = ("panoptic", "semantic", "instance_box", "instance_mask")[int(rng.integers(0, 4))]
    spec = random_spec(rng, task)
    table = pseudo_embeddings(spec.vocabulary_names, 6, int(rng.integers(0, 1000)))
    head = ToyHead.init(5, 4, FEATURE_DIM, 6, seed=int(rng.integers(0, 2**31)), scale=0.8)
    head = ToyHead(head.queries, head.mask_map, head.class_map, rng.normal(0, 0.5, 6))
    features = rng.normal(0, 1, (size, size, FEATURE_DIM))
    gts = tuple(random_gts(rng, spec, size, size, int(rng.integers(1, 4))))
    scene = SyntheticScene(features, gts, spec.name, task, np.zeros((size, size, 3)))
    shapes = head.shapes()

    lv, grads, asg = scene_loss(head, scene, spec, table)

    def unpack(v):
        return ToyHead.from_vector(v, shapes)

    def loss(v):
        return scene_loss(unpack(v), scene, spec, table, assignment=asg)[0].value

    def sig(v):
        from .cotrain.head import forward

        p = forward(unpack(v), features, table, spec)
        return _selection_signature(p.mask_logits, p.class_logits, spec)

    num, valid = numerical_grad(loss, head.to_vector(), signature=sig)
    return [_result(f"head[{task}]", grads.to_vector(), num, valid)]


def run_suite(seeds, size: int = 8) -> SuiteReport:
    report = SuiteReport()
    for seed in seeds:
        rng = np.random.default_rng(seed)
        report.results.extend(check_losses(rng, size))
        report.results.extend(check_total_loss(rng, size))
        report.results.extend(check_head(rng, size))
    return report
