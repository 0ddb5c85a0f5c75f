"""MERGE: collapse proposals that predict the same category into one entry.

Masks merge by an element-wise max over logits (equivalently over sigmoid
probabilities, since sigmoid is monotone); class logits merge by averaging.
Which categories get merged depends on the dataset's task.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import DatasetSpec, ProposalSet
from .errors import ShapeMismatch

SENTINEL = -100.0
EPS = 1e-6

MERGED = "merged_category"
RAW = "raw_proposal"


@dataclass(frozen=True)
class MergedEntry:
    kind: str
    category_id: int | None
    mask_logits: np.ndarray
    class_logits: np.ndarray
    members: tuple[int, ...]


@dataclass(frozen=True)
class MergedOutput:
    """Entries to be matched against GT.

    ``background_only`` lists proposals that belong to no entry (semantic
    task, background argmax); they only ever receive the background CE.
    """

    entries: tuple[MergedEntry, ...]
    background_only: tuple[int, ...] = ()

    def __len__(self):
        return len(self.entries)

    def mask_stack(self) -> np.ndarray:
        return np.stack([e.mask_logits for e in self.entries])

    def class_stack(self) -> np.ndarray:
        return np.stack([e.class_logits for e in self.entries])


def _members(proposals: ProposalSet, class_index: int) -> np.ndarray:
    return np.flatnonzero(proposals.argmax == class_index)


def merge_masks(proposals: ProposalSet, class_index: int) -> np.ndarray:
    """Pixel-wise max of the mask logits of proposals whose argmax is ``class_index``.

    Returns a plane filled with ``SENTINEL`` when no proposal predicts the class.
    """
    members = _members(proposals, class_index)
    if members.size == 0:
        return np.full((proposals.height, proposals.width), SENTINEL)
    return proposals.mask_logits[members].max(axis=0)


def merge_class_logits(proposals: ProposalSet, class_index: int) -> np.ndarray | None:
    members = _members(proposals, class_index)
    if members.size == 0:
        return None
    return proposals.class_logits[members].sum(axis=0) / (members.size + EPS)


def _merged_entry(proposals, class_index, category_id, members):
    return MergedEntry(
        MERGED,
        category_id,
        proposals.mask_logits[members].max(axis=0),
        proposals.class_logits[members].sum(axis=0) / (members.size + EPS),
        tuple(int(m) for m in members),
    )


def _raw_entry(proposals, j):
    return MergedEntry(RAW, None, proposals.mask_logits[j], proposals.class_logits[j], (int(j),))


def apply_task_merge(proposals: ProposalSet, spec: DatasetSpec) -> MergedOutput:
    """Build the task-specific set of entries that get matched to GT.

    panoptic: one merged entry per predicted stuff category, then one raw entry
    per remaining proposal (thing or background argmax).
    semantic: one merged entry per predicted category; background-argmax
    proposals are listed in ``background_only``.
    instance_*: one raw entry per proposal.
    """
    if proposals.num_classes != spec.num_classes:
        raise ShapeMismatch(
            f"proposals carry {proposals.num_classes} classes, "
            f"dataset {spec.name!r} has {spec.num_classes}"
        )
    argmax = proposals.argmax
    vocab = spec.vocabulary
    entries: list[MergedEntry] = []

    if spec.task == "panoptic":
        stuff = set(spec.stuff_categories)
        merged_idx = [k for k, c in enumerate(vocab) if c in stuff]
        for k in merged_idx:
            members = np.flatnonzero(argmax == k)
            if members.size:
                entries.append(_merged_entry(proposals, k, vocab[k], members))
        merged_set = set(merged_idx)
        for j in range(proposals.n):
            if int(argmax[j]) not in merged_set:
                entries.append(_raw_entry(proposals, j))
        return MergedOutput(tuple(entries))

    if spec.task == "semantic":
        for k, c in enumerate(vocab):
            members = np.flatnonzero(argmax == k)
            if members.size:
                entries.append(_merged_entry(proposals, k, c, members))
        bg = tuple(int(j) for j in np.flatnonzero(argmax == spec.num_classes))
        return MergedOutput(tuple(entries), bg)

    return MergedOutput(tuple(_raw_entry(proposals, j) for j in range(proposals.n)))


def merge_backward(
    grads: Sequence[tuple[np.ndarray | None, np.ndarray | None]],
    proposals: ProposalSet,
    merged: MergedOutput,
) -> tuple[np.ndarray, np.ndarray]:
    """Pull entry gradients back onto the proposal logits.

    ``grads[i]`` holds ``(d/d mask_logits, d/d class_logits)`` for entry ``i``;
    either may be None. The max routes each pixel's gradient to the member
    holding the max (lowest proposal index on ties); the mean hands every
    member ``1 / (count + EPS)`` of the class gradient.
    """
    if len(grads) != len(merged.entries):
        raise ShapeMismatch(f"{len(grads)} gradients for {len(merged.entries)} entries")
    gm = np.zeros_like(proposals.mask_logits)
    gz = np.zeros_like(proposals.class_logits)
    hw = proposals.mask_logits.shape[1:]
    for entry, (g_mask, g_class) in zip(merged.entries, grads):
        members = np.asarray(entry.members)
        if g_mask is not None:
            g_mask = np.asarray(g_mask)
            if g_mask.shape != hw:
                raise ShapeMismatch(f"mask gradient shape {g_mask.shape} != {hw}")
            if members.size == 1:
                gm[members[0]] += g_mask
            else:
                winner = np.argmax(proposals.mask_logits[members], axis=0)
                for slot, j in enumerate(members):
                    gm[j] += np.where(winner == slot, g_mask, 0.0)
        if g_class is not None:
            g_class = np.asarray(g_class)
            if g_class.shape != gz.shape[1:]:
                raise ShapeMismatch(f"class gradient shape {g_class.shape} != {gz.shape[1:]}")
            scale = 1.0 if entry.kind == RAW else 1.0 / (members.size + EPS)
            gz[members] += scale * g_class
    return gm, gz
