"""Synthetic shape scenes standing in for panoptic / semantic / box datasets.

All three kinds share one vocabulary, so a category name means the same thing
in every dataset. Scenes are laid out on a 2x2 grid of cells, each holding at
most one shape; the background is split between two stuff categories.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from ..core import DatasetSpec, LossWeights, SegmentGT, mask_bbox

IMAGE_SIZE = 64

CIRCLE, SQUARE, TRIANGLE, STRIPE, FIELD = 1, 2, 3, 4, 5
THINGS = (CIRCLE, SQUARE, TRIANGLE)
STUFF = (STRIPE, FIELD)
CATEGORY_NAMES = {
    CIRCLE: "circle",
    SQUARE: "square",
    TRIANGLE: "triangle",
    STRIPE: "stripe-stuff",
    FIELD: "field-stuff",
}
KINDS = ("panoptic_shapes", "semantic_shapes", "box_shapes")
TASK_OF_KIND = {"panoptic_shapes": "panoptic", "semantic_shapes": "semantic", "box_shapes": "instance_box"}
KIND_OF_TASK = {v: k for k, v in TASK_OF_KIND.items()}

_THING_RGB = {CIRCLE: (0.85, 0.25, 0.25), SQUARE: (0.25, 0.75, 0.3), TRIANGLE: (0.3, 0.35, 0.85)}
_STUFF_RGB = {STRIPE: (0.55, 0.5, 0.6), FIELD: (0.45, 0.55, 0.35)}

NUM_RANDOM_FEATURES = 6
FEATURE_DIM = 2 + 4 + 3 + 1 + NUM_RANDOM_FEATURES + 1
_PROJECTION_SEED = 20240601


@dataclass(frozen=True)
class SyntheticScene:
    image_features: np.ndarray  # (H, W, FEATURE_DIM)
    gt: tuple[SegmentGT, ...]
    spec_name: str
    kind: str
    rgb: np.ndarray = field(repr=False)
    # for box_shapes only: the true instance masks, kept for evaluation
    hidden: tuple[SegmentGT, ...] = ()

    @property
    def height(self) -> int:
        return self.image_features.shape[0]

    @property
    def width(self) -> int:
        return self.image_features.shape[1]


def default_specs() -> dict[str, DatasetSpec]:
    """Dataset descriptors for the three synthetic kinds.

    Loss and cost weights follow the per-task table used for full-scale
    training (semantic, panoptic and box-supervised instance rows).
    """
    sem = DatasetSpec(
        "semantic_shapes", THINGS, STUFF, CATEGORY_NAMES, "semantic",
        loss_weights=LossWeights(1, 20, 5, 0), cost_weights=LossWeights(1, 20, 5, 0),
        sampling_weight=1.0,
    )
    pan = DatasetSpec(
        "panoptic_shapes", THINGS, STUFF, CATEGORY_NAMES, "panoptic",
        loss_weights=LossWeights(1, 20, 5, 0), cost_weights=LossWeights(1, 0, 1, 0),
        sampling_weight=4.0,
    )
    box = DatasetSpec(
        "box_shapes", THINGS, (), {c: CATEGORY_NAMES[c] for c in THINGS}, "instance_box",
        loss_weights=LossWeights(1, 0, 0, 2), cost_weights=LossWeights(1, 0, 0, 0.5),
        sampling_weight=4.0,
    )
    return {s.name: s for s in (sem, pan, box)}


def _shape_mask(kind: int, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    if kind == CIRCLE:
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == SQUARE:
        half = 0.8 * r
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    # upward triangle: apex at the top, base at the bottom
    top, bottom = cy - r, cy + r
    half_width = r * (yy - top) / (bottom - top)
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half_width)


def _layout(rng: np.random.Generator, size: int):
    cell = size // 2
    n_things = int(rng.integers(1, 5))
    cells = rng.permutation(4)[:n_things]
    things = []
    occupied = np.zeros((size, size), dtype=bool)
    for c in sorted(cells.tolist()):
        kind = THINGS[int(rng.integers(0, 3))]
        r = float(rng.uniform(0.22, 0.4) * cell)
        slack = cell / 2 - r - 1
        cx = (c % 2) * cell + cell / 2 + rng.uniform(-slack, slack)
        cy = (c // 2) * cell + cell / 2 + rng.uniform(-slack, slack)
        m = _shape_mask(kind, cx, cy, r, size) & ~occupied
        if m.sum() < 4:
            continue
        occupied |= m
        things.append((kind, m))
    if rng.random() < 0.25:
        split = 0 if rng.random() < 0.5 else size
    else:
        split = int(rng.integers(size // 4, 3 * size // 4))
    rows = np.arange(size)[:, None] < split
    stripe = np.broadcast_to(rows, (size, size)) & ~occupied
    field_ = ~np.broadcast_to(rows, (size, size)) & ~occupied
    stuff = [(cat, m) for cat, m in ((STRIPE, stripe), (FIELD, field_)) if m.any()]
    return things, stuff, rows


def _paint(rng, things, rows, size):
    rgb = np.empty((size, size, 3))
    rgb[:] = _STUFF_RGB[FIELD]
    rgb[np.broadcast_to(rows, (size, size))] = _STUFF_RGB[STRIPE]
    yy = np.arange(size)[:, None] * np.ones((1, size))
    texture = np.where(rows, 0.5 + 0.5 * np.sin(2 * np.pi * yy / 6.0), 0.0)
    for kind, m in things:
        color = np.clip(np.asarray(_THING_RGB[kind]) + rng.uniform(-0.12, 0.12, 3), 0, 1)
        rgb[m] = color
        texture = np.where(m, 0.0, texture)
    rgb = np.clip(rgb + rng.normal(0, 0.04, rgb.shape), 0, 1)
    return rgb, texture


def _random_projection() -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(_PROJECTION_SEED)
    return rng.normal(0, 1.5, (6, NUM_RANDOM_FEATURES)), rng.normal(0, 0.5, NUM_RANDOM_FEATURES)


def featurize(rgb: np.ndarray, texture: np.ndarray) -> np.ndarray:
    """Deterministic per-pixel features.

    Channels: normalised x, y; one-hot of the 2x2 grid cell; RGB; texture;
    tanh of fixed random projections of (RGB, texture, x, y); a constant 1.
    """
    h, w = texture.shape
    ys = (np.arange(h) + 0.5) / h * 2 - 1
    xs = (np.arange(w) + 0.5) / w * 2 - 1
    x = np.broadcast_to(xs[None, :], (h, w))
    y = np.broadcast_to(ys[:, None], (h, w))
    cell = (y >= 0).astype(int) * 2 + (x >= 0).astype(int)
    onehot = np.eye(4)[cell]
    base = np.concatenate([rgb, texture[..., None], x[..., None], y[..., None]], axis=-1)
    proj_w, proj_b = _random_projection()
    rand = np.tanh(base @ proj_w + proj_b)
    return np.concatenate(
        [x[..., None], y[..., None], onehot, rgb, texture[..., None], rand, np.ones((h, w, 1))],
        axis=-1,
    )


def _scene_rng(kind: str, seed: int, index: int) -> np.random.Generator:
    # scene content does not depend on the kind, only on (seed, index)
    del kind
    digest = hashlib.sha256(f"scene\x00{seed}\x00{index}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def make_scene(kind: str, seed: int, index: int, size: int = IMAGE_SIZE, spec_name: str | None = None):
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    rng = _scene_rng(kind, seed, index)
    things, stuff, rows = _layout(rng, size)
    rgb, texture = _paint(rng, things, rows, size)
    features = featurize(rgb, texture)
    hidden: tuple[SegmentGT, ...] = ()
    if kind == "panoptic_shapes":
        gt = [SegmentGT.from_mask(c, m, with_box=True) for c, m in things]
        gt += [SegmentGT.from_mask(c, m) for c, m in stuff]
    elif kind == "semantic_shapes":
        gt = []
        for c in THINGS:
            union = np.zeros((size, size), dtype=bool)
            for k, m in things:
                if k == c:
                    union |= m
            if union.any():
                gt.append(SegmentGT.from_mask(c, union))
        gt += [SegmentGT.from_mask(c, m) for c, m in stuff]
    else:
        gt = [SegmentGT(c, None, mask_bbox(m)) for c, m in things]
        hidden = tuple(SegmentGT.from_mask(c, m, with_box=True) for c, m in things)
    rgb.setflags(write=False)
    features.setflags(write=False)
    return SyntheticScene(features, tuple(gt), spec_name or kind, kind, rgb, hidden)


def synth_generate(kind: str, count: int, seed: int, size: int = IMAGE_SIZE, spec_name: str | None = None):
    """``count`` deterministic scenes of the given kind."""
    if count < 1:
        raise ValueError("count must be at least 1")
    return [make_scene(kind, seed, i, size, spec_name) for i in range(count)]
