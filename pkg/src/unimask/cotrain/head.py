"""A linear proposal head: learnable queries dotted into per-pixel features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import DatasetSpec, EmbeddingTable, ProposalSet
from ..errors import DimMismatch

PARAM_NAMES = ("queries", "mask_map", "class_map", "background")


@dataclass(frozen=True)
class ToyHead:
    """Parameters of the head.

    queries: (N, Dq); mask_map: (Dq, Df); class_map: (Dq, De); background: (De,).
    Query ``j`` yields the mask embedding ``queries[j] @ mask_map`` and the class
    embedding ``queries[j] @ class_map``.
    """

    queries: np.ndarray
    mask_map: np.ndarray
    class_map: np.ndarray
    background: np.ndarray

    def __post_init__(self):
        for name in PARAM_NAMES:
            a = np.array(getattr(self, name), dtype=np.float64, copy=True)
            if not np.isfinite(a).all():
                raise ValueError(f"non-finite values in {name}")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        n, dq = self.queries.shape
        if self.mask_map.shape[0] != dq or self.class_map.shape[0] != dq:
            raise DimMismatch("query dim disagrees with mask_map / class_map")
        if self.background.shape != (self.class_map.shape[1],):
            raise DimMismatch("background dim must equal the class embedding dim")

    @property
    def num_queries(self) -> int:
        return self.queries.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.mask_map.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.class_map.shape[1]

    @classmethod
    def init(cls, num_queries: int, query_dim: int, feature_dim: int, embed_dim: int, seed: int, scale: float = 0.3):
        rng = np.random.default_rng(seed)
        return cls(
            rng.normal(0, scale, (num_queries, query_dim)),
            rng.normal(0, scale, (query_dim, feature_dim)),
            rng.normal(0, scale, (query_dim, embed_dim)),
            np.zeros(embed_dim),
        )

    @classmethod
    def zeros_like(cls, other: ToyHead) -> ToyHead:
        return cls(*(np.zeros_like(getattr(other, n)) for n in PARAM_NAMES))

    def shapes(self) -> dict[str, list[int]]:
        return {n: list(getattr(self, n).shape) for n in PARAM_NAMES}

    def to_vector(self) -> np.ndarray:
        return np.concatenate([getattr(self, n).ravel() for n in PARAM_NAMES])

    @classmethod
    def from_vector(cls, vec: np.ndarray, shapes: dict) -> ToyHead:
        sizes = [int(np.prod(shapes[n])) for n in PARAM_NAMES]
        if sum(sizes) != len(vec):
            raise DimMismatch(f"vector has {len(vec)} values, shapes need {sum(sizes)}")
        parts, offset = [], 0
        for n, size in zip(PARAM_NAMES, sizes):
            parts.append(np.asarray(vec[offset : offset + size]).reshape(shapes[n]))
            offset += size
        return cls(*parts)

    def step(self, grad: ToyHead, rate: float) -> ToyHead:
        return ToyHead(*(getattr(self, n) - rate * getattr(grad, n) for n in PARAM_NAMES))


def forward(head: ToyHead, features: np.ndarray, table: EmbeddingTable, spec: DatasetSpec) -> ProposalSet:
    """Mask logits = features . (query @ mask_map); class logits via the shared classifier."""
    if features.shape[-1] != head.feature_dim:
        raise DimMismatch(f"features have {features.shape[-1]} channels, head expects {head.feature_dim}")
    if table.dim != head.embed_dim:
        raise DimMismatch(f"embedding table dim {table.dim} != head embed dim {head.embed_dim}")
    h, w, _ = features.shape
    mask_emb = head.queries @ head.mask_map
    masks = (features.reshape(h * w, -1) @ mask_emb.T).T.reshape(-1, h, w)
    classifier = table.with_background(head.background).matrix(spec.vocabulary_names)
    class_logits = (head.queries @ head.class_map) @ classifier.T
    return ProposalSet(masks, class_logits)


def backward(
    head: ToyHead,
    features: np.ndarray,
    table: EmbeddingTable,
    spec: DatasetSpec,
    grad_mask: np.ndarray,
    grad_class: np.ndarray,
) -> ToyHead:
    """Parameter gradients given gradients on the proposal logits."""
    h, w, _ = features.shape
    n = head.num_queries
    classifier = table.with_background(head.background).matrix(spec.vocabulary_names)
    d_mask_emb = grad_mask.reshape(n, h * w) @ features.reshape(h * w, -1)  # (N, Df)
    class_emb = head.queries @ head.class_map
    d_class_emb = grad_class @ classifier  # (N, De)
    d_background = grad_class[:, -1] @ class_emb
    d_queries = d_mask_emb @ head.mask_map.T + d_class_emb @ head.class_map.T
    d_mask_map = head.queries.T @ d_mask_emb
    d_class_map = head.queries.T @ d_class_emb
    return ToyHead(d_queries, d_mask_map, d_class_map, d_background)
