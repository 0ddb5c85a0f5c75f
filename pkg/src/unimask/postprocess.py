"""Inference-time conversion of proposals into task outputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, softmax

from .core import DatasetSpec, ProposalSet, RleMask, rle_encode
from .errors import WrongTask
from .merge import apply_task_merge

VOID = 0  # panoptic segment id for unassigned pixels
SEMANTIC_VOID = -1

PANOPTIC_CONF_COCO = 0.85
PANOPTIC_CONF_ADE = 0.8
MIN_AREA = 4
OVERLAP_KEEP = 0.8
MAX_INSTANCES = 100


@dataclass(frozen=True)
class Segment:
    id: int
    category_id: int
    is_thing: bool
    area: int
    score: float = 1.0


@dataclass(frozen=True)
class PanopticOutput:
    segment_map: np.ndarray
    segments: tuple[Segment, ...]

    def segment_mask(self, seg_id: int) -> np.ndarray:
        return self.segment_map == seg_id

    @classmethod
    def from_masks(cls, masks, categories, things=None, scores=None) -> PanopticOutput:
        """Paint non-overlapping binary masks into a segment map with ids 1..n."""
        masks = [np.asarray(m, dtype=bool) for m in masks]
        if not masks:
            raise ValueError("from_masks needs at least one mask to know the image size")
        seg_map = np.zeros(masks[0].shape, dtype=np.int64)
        segs = []
        for k, (m, c) in enumerate(zip(masks, categories)):
            if (seg_map[m] != VOID).any():
                raise ValueError("panoptic masks must not overlap")
            seg_map[m] = k + 1
            segs.append(
                Segment(
                    k + 1,
                    int(c),
                    bool(things[k]) if things is not None else True,
                    int(m.sum()),
                    float(scores[k]) if scores is not None else 1.0,
                )
            )
        return cls(seg_map, tuple(segs))


@dataclass(frozen=True)
class SemanticOutput:
    label_map: np.ndarray


@dataclass(frozen=True)
class Instance:
    category_id: int
    score: float
    mask: RleMask


@dataclass(frozen=True)
class InstanceOutput:
    instances: tuple[Instance, ...]


def _require(spec: DatasetSpec, *tasks: str):
    if spec.task not in tasks:
        raise WrongTask(f"dataset {spec.name!r} has task {spec.task!r}, expected {tasks}")


def panoptic_infer(
    proposals: ProposalSet,
    spec: DatasetSpec,
    conf_threshold: float = PANOPTIC_CONF_COCO,
    min_area: int = MIN_AREA,
    overlap_keep: float = OVERLAP_KEEP,
) -> PanopticOutput:
    """Non-overlapping panoptic output from proposals.

    Entries come from the panoptic MERGE. Entries whose argmax is background or
    whose best non-background probability is below ``conf_threshold`` are
    dropped. Each pixel goes to the entry with the largest
    ``score * sigmoid(mask)``; a segment keeps the pixels it wins where its own
    sigmoid is at least 0.5. Segments smaller than ``min_area``, or keeping
    less than ``overlap_keep`` of their own binarised mask, are discarded.
    """
    _require(spec, "panoptic")
    h, w = proposals.height, proposals.width
    seg_map = np.zeros((h, w), dtype=np.int64)
    merged = apply_task_merge(proposals, spec)
    k = spec.num_classes
    kept = []
    for entry in merged.entries:
        prob = softmax(entry.class_logits)
        label = int(np.argmax(prob[:k]))
        if int(np.argmax(prob)) == k or prob[label] < conf_threshold:
            continue
        kept.append((spec.vocabulary[label], float(prob[label]), expit(entry.mask_logits)))
    if not kept:
        return PanopticOutput(seg_map, ())

    soft = np.stack([m for _, _, m in kept])
    scores = np.array([s for _, s, _ in kept])
    owner = np.argmax(scores[:, None, None] * soft, axis=0)
    segments = []
    for idx, (cat, score, m) in enumerate(kept):
        original = m >= 0.5
        pix = (owner == idx) & original
        area = int(pix.sum())
        orig_area = int(original.sum())
        if area == 0 or orig_area == 0 or area < min_area:
            continue
        if area / orig_area < overlap_keep:
            continue
        seg_id = len(segments) + 1
        seg_map[pix] = seg_id
        segments.append(Segment(seg_id, cat, spec.is_thing(cat), area, score))
    return PanopticOutput(seg_map, tuple(segments))


def semantic_infer(proposals: ProposalSet, spec: DatasetSpec) -> SemanticOutput:
    """Per-pixel argmax over merged categories of ``p(c) * sigmoid(M(c))``."""
    _require(spec, "semantic")
    merged = apply_task_merge(proposals, spec)
    label_map = np.full((proposals.height, proposals.width), SEMANTIC_VOID, dtype=np.int64)
    if not merged.entries:
        return SemanticOutput(label_map)
    # category-id order so that argmax ties resolve to the lowest id
    entries = sorted(merged.entries, key=lambda e: e.category_id)
    scores = []
    for e in entries:
        p = softmax(e.class_logits)[spec.class_index(e.category_id)]
        scores.append(p * expit(e.mask_logits))
    best = np.argmax(np.stack(scores), axis=0)
    cats = np.array([e.category_id for e in entries])
    return SemanticOutput(cats[best])


def instance_infer(
    proposals: ProposalSet,
    spec: DatasetSpec,
    max_instances: int = MAX_INSTANCES,
    score_threshold: float = 0.0,
    min_area: int = MIN_AREA,
) -> InstanceOutput:
    """Top-scoring proposals as (possibly overlapping) instances.

    score = class probability x localisation score, where the localisation
    score is the mean sigmoid over pixels with sigmoid > 0.5.
    """
    _require(spec, "instance_box", "instance_mask")
    k = spec.num_classes
    probs = softmax(proposals.class_logits, axis=1)
    soft = expit(proposals.mask_logits)
    found = []
    for j in range(proposals.n):
        label = int(np.argmax(probs[j]))
        if label == k:
            continue
        fg = soft[j] > 0.5
        area = int(fg.sum())
        if area < min_area or area == 0:
            continue
        score = float(probs[j, label] * soft[j][fg].mean())
        if score <= score_threshold:
            continue
        found.append((score, j, spec.vocabulary[label], fg))
    found.sort(key=lambda t: (-t[0], t[1]))
    return InstanceOutput(
        tuple(Instance(cat, score, rle_encode(fg)) for score, _, cat, fg in found[:max_instances])
    )
