"""Domain types for mask proposals, dataset descriptors, RLE masks and the
shared-embedding classifier.

Conventions used throughout the package:

* mask logits are float64 arrays shaped ``(N, H, W)``;
* class logits are float64 arrays shaped ``(N, K + 1)`` where ``K`` is the
  size of the active vocabulary and the trailing entry is background;
* boxes are half-open pixel rectangles ``(x0, y0, x1, y1)``, i.e. the box
  covers columns ``x0 .. x1 - 1`` and rows ``y0 .. y1 - 1``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DimMismatch, MissingCategory, ShapeMismatch, SumMismatch

TASKS = ("panoptic", "semantic", "instance_box", "instance_mask")


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# RLE
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RleMask:
    """Uncompressed column-major run-length encoding (COCO convention)."""

    height: int
    width: int
    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if any(c < 0 for c in self.counts):
            raise ValueError("RLE counts must be nonnegative")

    @property
    def area(self) -> int:
        return int(sum(self.counts[1::2]))

    def to_json(self) -> dict:
        return {"size": [self.height, self.width], "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: Mapping) -> RleMask:
        h, w = obj["size"]
        return cls(int(h), int(w), tuple(obj["counts"]))


def rle_encode(mask) -> RleMask:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D mask, got shape {mask.shape}")
    h, w = mask.shape
    flat = mask.ravel(order="F").astype(bool)
    if flat.size == 0:
        return RleMask(h, w, (0,))
    # run boundaries; a leading 0-length run when the first pixel is set
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(edges).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return RleMask(h, w, tuple(counts))


def rle_decode(rle: RleMask) -> np.ndarray:
    total = rle.height * rle.width
    if sum(rle.counts) != total:
        raise SumMismatch(
            f"RLE counts sum to {sum(rle.counts)}, expected {rle.height}x{rle.width}={total}"
        )
    values = np.zeros(len(rle.counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, rle.counts)
    return flat.reshape((rle.height, rle.width), order="F")


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int] | None:
    """Tight half-open bounding rect of a binary mask, or None if empty."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbour subsampling used for GT preprocessing."""
    if stride <= 1:
        return mask
    off = stride // 2
    return mask[off::stride, off::stride]


# ---------------------------------------------------------------------------
# Proposals and GT
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProposalSet:
    """N mask-logit planes paired with N class-logit vectors."""

    mask_logits: np.ndarray
    class_logits: np.ndarray

    def __post_init__(self):
        m = _frozen(self.mask_logits)
        z = _frozen(self.class_logits)
        if m.ndim != 3:
            raise ShapeMismatch(f"mask_logits must be (N, H, W), got {m.shape}")
        if z.ndim != 2 or z.shape[0] != m.shape[0]:
            raise ShapeMismatch(
                f"class_logits must be (N, K+1) with N={m.shape[0]}, got {z.shape}"
            )
        if z.shape[1] < 1:
            raise ShapeMismatch("class_logits need at least the background entry")
        if not (np.isfinite(m).all() and np.isfinite(z).all()):
            raise ValueError("proposal logits must be finite")
        object.__setattr__(self, "mask_logits", m)
        object.__setattr__(self, "class_logits", z)

    @property
    def n(self) -> int:
        return self.mask_logits.shape[0]

    @property
    def height(self) -> int:
        return self.mask_logits.shape[1]

    @property
    def width(self) -> int:
        return self.mask_logits.shape[2]

    @property
    def num_classes(self) -> int:
        """Vocabulary size K (background excluded)."""
        return self.class_logits.shape[1] - 1

    @cached_property
    def argmax(self) -> np.ndarray:
        # np.argmax picks the first maximal entry, which fixes tie handling
        return np.argmax(self.class_logits, axis=1)

    def permuted(self, order: Sequence[int]) -> ProposalSet:
        order = np.asarray(order)
        return ProposalSet(self.mask_logits[order], self.class_logits[order])


@dataclass(frozen=True)
class LossWeights:
    ce: float = 1.0
    focal: float = 0.0
    dice: float = 0.0
    proj: float = 0.0

    def __post_init__(self):
        for name in ("ce", "focal", "dice", "proj"):
            v = float(getattr(self, name))
            if v < 0 or not np.isfinite(v):
                raise ValueError(f"weight {name} must be a finite nonnegative number")
            object.__setattr__(self, name, v)

    def to_json(self) -> list[float]:
        return [self.ce, self.focal, self.dice, self.proj]

    @classmethod
    def from_json(cls, obj) -> LossWeights:
        if isinstance(obj, Mapping):
            return cls(**obj)
        return cls(*obj)


@dataclass(frozen=True)
class DatasetSpec:
    """A dataset's vocabulary, task and per-dataset optimisation settings.

    Category ids are integers; ``category_names`` maps each id to the name
    used to look up its classifier row in an :class:`EmbeddingTable`. The
    class-logit index of a category is its position in :attr:`vocabulary`,
    which lists thing categories first and then stuff categories, each in
    declared order.
    """

    name: str
    thing_categories: tuple[int, ...]
    stuff_categories: tuple[int, ...]
    category_names: Mapping[int, str]
    task: str
    loss_weights: LossWeights = field(default_factory=LossWeights)
    cost_weights: LossWeights = field(default_factory=LossWeights)
    sampling_weight: float = 1.0
    lr_multiplier: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    background_weight: float = 0.05

    def __post_init__(self):
        things = tuple(int(c) for c in self.thing_categories)
        stuff = tuple(int(c) for c in self.stuff_categories)
        object.__setattr__(self, "thing_categories", things)
        object.__setattr__(self, "stuff_categories", stuff)
        object.__setattr__(
            self, "category_names", {int(k): str(v) for k, v in self.category_names.items()}
        )
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if len(set(things)) != len(things) or len(set(stuff)) != len(stuff):
            raise ValueError("duplicate category ids")
        if set(things) & set(stuff):
            raise ValueError("thing and stuff categories must be disjoint")
        if self.task.startswith("instance") and stuff:
            raise ValueError("instance tasks cannot have stuff categories")
        if self.task == "semantic" and (self.loss_weights.proj or self.cost_weights.proj):
            raise ValueError("semantic datasets take no projection loss")
        missing = [c for c in things + stuff if c not in self.category_names]
        if missing:
            raise ValueError(f"categories without names: {missing}")
        if self.sampling_weight < 0:
            raise ValueError("sampling_weight must be nonnegative")
        if self.lr_multiplier <= 0:
            raise ValueError("lr_multiplier must be positive")
        if self.focal_gamma < 0 or not 0 <= self.focal_alpha <= 1:
            raise ValueError("focal parameters out of range")

    @property
    def vocabulary(self) -> tuple[int, ...]:
        return self.thing_categories + self.stuff_categories

    @property
    def vocabulary_names(self) -> list[str]:
        return [self.category_names[c] for c in self.vocabulary]

    @property
    def num_classes(self) -> int:
        return len(self.vocabulary)

    @cached_property
    def _index(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.vocabulary)}

    def class_index(self, category_id: int) -> int:
        try:
            return self._index[int(category_id)]
        except KeyError:
            raise MissingCategory(f"category {category_id} not in dataset {self.name!r}") from None

    def is_thing(self, category_id: int) -> bool:
        return int(category_id) in self.thing_categories

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "task": self.task,
            "thing_categories": list(self.thing_categories),
            "stuff_categories": list(self.stuff_categories),
            "category_names": {str(k): v for k, v in sorted(self.category_names.items())},
            "loss_weights": self.loss_weights.to_json(),
            "cost_weights": self.cost_weights.to_json(),
            "sampling_weight": self.sampling_weight,
            "lr_multiplier": self.lr_multiplier,
            "focal_gamma": self.focal_gamma,
            "focal_alpha": self.focal_alpha,
            "background_weight": self.background_weight,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> DatasetSpec:
        kw = dict(obj)
        kw["category_names"] = {int(k): v for k, v in kw["category_names"].items()}
        kw["thing_categories"] = tuple(kw.get("thing_categories", ()))
        kw["stuff_categories"] = tuple(kw.get("stuff_categories", ()))
        for key in ("loss_weights", "cost_weights"):
            if key in kw:
                kw[key] = LossWeights.from_json(kw[key])
        return cls(**kw)


@dataclass(frozen=True)
class SegmentGT:
    """One ground-truth segment. At least one of ``mask`` / ``box`` is set."""

    category_id: int
    mask: RleMask | None = None
    box: tuple[int, int, int, int] | None = None
    ignore: bool = False

    def __post_init__(self):
        if self.mask is None and self.box is None:
            raise ValueError("a segment needs a mask, a box, or both")
        if self.box is not None:
            box = tuple(int(v) for v in self.box)
            object.__setattr__(self, "box", box)
            x0, y0, x1, y1 = box
            if x1 <= x0 or y1 <= y0:
                raise ValueError(f"degenerate box {box}")
            if self.mask is not None:
                rect = mask_bbox(self.dense_mask)
                if rect is not None and not (
                    x0 <= rect[0] and y0 <= rect[1] and rect[2] <= x1 and rect[3] <= y1
                ):
                    raise ValueError(f"box {box} does not contain the mask extent {rect}")

    @cached_property
    def dense_mask(self) -> np.ndarray | None:
        if self.mask is None:
            return None
        m = rle_decode(self.mask)
        m.setflags(write=False)
        return m

    @classmethod
    def from_mask(cls, category_id: int, mask, *, with_box: bool = False, ignore: bool = False):
        mask = np.asarray(mask, dtype=bool)
        box = mask_bbox(mask) if with_box else None
        return cls(int(category_id), rle_encode(mask), box, ignore)


# ---------------------------------------------------------------------------
# Shared-embedding classifier
# ---------------------------------------------------------------------------


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError("cannot normalise a zero embedding")
    return v / norm


@dataclass(frozen=True)
class EmbeddingTable:
    """Frozen per-category classifier vectors plus one learnable background row."""

    dim: int
    entries: Mapping[str, np.ndarray]
    background: np.ndarray

    def __post_init__(self):
        entries = {}
        for name, vec in self.entries.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (self.dim,):
                raise DimMismatch(f"embedding for {name!r} has shape {vec.shape}, dim={self.dim}")
            entries[name] = _frozen(_unit(vec))
        bg = np.asarray(self.background, dtype=np.float64)
        if bg.shape != (self.dim,):
            raise DimMismatch(f"background has shape {bg.shape}, dim={self.dim}")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "background", _frozen(bg))

    def matrix(self, vocabulary: Sequence[str]) -> np.ndarray:
        """Stack classifier rows for ``vocabulary`` followed by the background row."""
        rows = []
        for name in vocabulary:
            if name not in self.entries:
                raise MissingCategory(f"no embedding for category {name!r}")
            rows.append(self.entries[name])
        rows.append(self.background)
        return np.stack(rows)

    def with_background(self, background) -> EmbeddingTable:
        return EmbeddingTable(self.dim, self.entries, background)

    def to_json(self) -> dict:
        return {
            "dim": self.dim,
            "entries": {k: v.tolist() for k, v in sorted(self.entries.items())},
        }


def classify(class_embedding, table: EmbeddingTable, vocabulary: Sequence[str]) -> np.ndarray:
    """Class logits of one embedding against ``vocabulary`` (plus background last)."""
    e = np.asarray(class_embedding, dtype=np.float64)
    if e.shape[-1] != table.dim:
        raise DimMismatch(f"embedding dim {e.shape[-1]} != table dim {table.dim}")
    return e @ table.matrix(vocabulary).T


def pseudo_embeddings(names: Sequence[str], dim: int, seed: int) -> EmbeddingTable:
    """Deterministic unit vectors standing in for frozen text embeddings.

    Each vector depends only on ``(name, dim, seed)``, so a category name that
    occurs in several datasets gets the same classifier row everywhere. The
    background row starts at zero.
    """
    if dim < 2:
        raise ValueError("dim must be at least 2")
    entries = {}
    for name in names:
        digest = hashlib.sha256(f"{seed}\x00{dim}\x00{name}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        entries[name] = rng.standard_normal(dim)
    return EmbeddingTable(dim, entries, np.zeros(dim))


def load_embeddings(path) -> EmbeddingTable:
    """Read ``{"dim": int, "entries": {name: [floats]}}``; vectors are L2-normalised."""
    obj = json.loads(Path(path).read_text())
    dim = int(obj["dim"])
    bg = obj.get("background", [0.0] * dim)
    return EmbeddingTable(dim, {k: np.asarray(v) for k, v in obj["entries"].items()}, bg)


def save_embeddings(table: EmbeddingTable, path) -> None:
    Path(path).write_text(json.dumps(table.to_json(), sort_keys=True))
