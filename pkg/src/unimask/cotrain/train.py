"""One-dataset-per-batch co-training of the toy head, and its evaluation."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..core import DatasetSpec, EmbeddingTable, SegmentGT, downsample_mask, pseudo_embeddings, rle_encode
from ..losses import LossValue, total_loss
from ..matcher import match
from ..merge import apply_task_merge
from ..metrics import MetricReport, mask_ap, mean_iou, panoptic_quality
from ..postprocess import PanopticOutput, SemanticOutput, instance_infer, panoptic_infer, semantic_infer
from .head import ToyHead, backward, forward
from .synth import FEATURE_DIM, IMAGE_SIZE, KIND_OF_TASK, SyntheticScene, default_specs, synth_generate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    datasets: tuple[DatasetSpec, ...]
    steps: int = 600
    batch_size: int = 4
    learning_rate: float = 0.05
    seed: int = 0
    scenes_per_dataset: int = 256
    eval_scenes: int = 64
    eval_seed: int = 9999
    image_size: int = IMAGE_SIZE
    num_queries: int = 12
    query_dim: int = 16
    embed_dim: int = 32
    embedding_seed: int = 0
    init_scale: float = 0.3
    gt_stride: int = 1
    panoptic_conf_threshold: float = 0.85

    def __post_init__(self):
        object.__setattr__(self, "datasets", tuple(self.datasets))
        if not self.datasets:
            raise ValueError("at least one dataset is required")
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("need steps >= 0, batch_size >= 1 and learning_rate > 0")
        if self.scenes_per_dataset < 1 or self.eval_scenes < 1:
            raise ValueError("scene counts must be positive")
        if sum(d.sampling_weight for d in self.datasets) <= 0:
            raise ValueError("sampling weights must not all be zero")
        names = [d.name for d in self.datasets]
        if len(set(names)) != len(names):
            raise ValueError("dataset names must be unique")

    @property
    def sampling(self) -> np.ndarray:
        w = np.array([d.sampling_weight for d in self.datasets], dtype=np.float64)
        return w / w.sum()

    def to_json(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "datasets"}
        out["datasets"] = [d.to_json() for d in self.datasets]
        return out

    @classmethod
    def from_json(cls, obj) -> TrainConfig:
        kw = dict(obj)
        kw["datasets"] = tuple(DatasetSpec.from_json(d) for d in kw["datasets"])
        return cls(**kw)


def standard_config(seed: int = 0, **overrides) -> TrainConfig:
    """Three synthetic datasets sampled 1:4:4 (semantic : panoptic : box)."""
    specs = default_specs()
    datasets = (specs["semantic_shapes"], specs["panoptic_shapes"], specs["box_shapes"])
    return replace(TrainConfig(datasets=datasets, seed=seed), **overrides)


def _derive_seed(*parts) -> int:
    digest = hashlib.sha256("\x00".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def sample_batch(config: TrainConfig, step: int, dataset_sizes: Sequence[int] | None = None):
    """Pick one dataset (probability proportional to its weight) and a whole batch from it.

    Scenes are drawn with replacement. The result depends only on
    ``(config.seed, step)``.
    """
    rng = np.random.default_rng([config.seed, step])
    d = int(rng.choice(len(config.datasets), p=config.sampling))
    size = dataset_sizes[d] if dataset_sizes is not None else config.scenes_per_dataset
    return d, rng.integers(0, size, size=config.batch_size)


def build_table(config: TrainConfig) -> EmbeddingTable:
    names = sorted({n for d in config.datasets for n in d.vocabulary_names})
    return pseudo_embeddings(names, config.embed_dim, config.embedding_seed)


def downsample_scene(scene: SyntheticScene, stride: int) -> SyntheticScene:
    """Subsample features and GT masks by ``stride``; boxes are rescaled."""
    if stride <= 1:
        return scene
    off = stride // 2
    feats = scene.image_features[off::stride, off::stride]
    h, w = feats.shape[:2]
    gts = []
    for g in scene.gt:
        mask = rle_encode(downsample_mask(g.dense_mask, stride)) if g.mask is not None else None
        box = None
        if g.box is not None:
            x0, y0, x1, y1 = g.box
            box = (x0 // stride, y0 // stride, min(-(-x1 // stride), w), min(-(-y1 // stride), h))
        if mask is not None and mask.area == 0 and box is None:
            continue
        if mask is not None and box is not None:
            mask = None if mask.area == 0 else mask
        gts.append(SegmentGT(g.category_id, mask, box, g.ignore))
    return replace(scene, image_features=feats, gt=tuple(gts))


def scene_loss(head: ToyHead, scene: SyntheticScene, spec: DatasetSpec, table: EmbeddingTable, assignment=None):
    """Loss and parameter gradients for one scene.

    The matching is a non-differentiable selection: pass ``assignment`` to
    hold it fixed, otherwise it is recomputed. Returns
    ``(LossValue, grads as ToyHead, assignment)``.
    """
    props = forward(head, scene.image_features, table, spec)
    merged = apply_task_merge(props, spec)
    if assignment is None:
        assignment = match(merged, scene.gt, spec)
    lv = total_loss(props, merged, assignment.pairs, assignment.unmatched_predictions, scene.gt, spec)
    grads = backward(head, scene.image_features, table, spec, lv.grad_mask, lv.grad_class)
    return lv, grads, assignment


def train_step(head: ToyHead, batch: Sequence[SyntheticScene], spec: DatasetSpec, table: EmbeddingTable, lr: float):
    """One gradient-descent step on the batch-mean loss at rate ``lr * spec.lr_multiplier``."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    total = 0.0
    grad = ToyHead.zeros_like(head)
    grad_vec = grad.to_vector()
    for scene in batch:
        lv, g, _ = scene_loss(head, scene, spec, table)
        total += lv.value
        grad_vec = grad_vec + g.to_vector()
    n = len(batch)
    grad = ToyHead.from_vector(grad_vec / n, head.shapes())
    return head.step(grad, lr * spec.lr_multiplier), LossValue(total / n)


@dataclass
class TrainResult:
    head: ToyHead
    table: EmbeddingTable
    losses: list[float] = field(default_factory=list)
    draws: list[int] = field(default_factory=list)

    def draws_per_dataset(self, n: int) -> list[int]:
        return np.bincount(np.asarray(self.draws, dtype=int), minlength=n).tolist()


def training_scenes(config: TrainConfig) -> list[list[SyntheticScene]]:
    out = []
    for spec in config.datasets:
        scenes = synth_generate(
            KIND_OF_TASK[spec.task],
            config.scenes_per_dataset,
            _derive_seed("train", config.seed, spec.name) % (2**31),
            config.image_size,
            spec.name,
        )
        out.append([downsample_scene(s, config.gt_stride) for s in scenes])
    return out


def train(config: TrainConfig, steps: int | None = None) -> TrainResult:
    table = build_table(config)
    head = ToyHead.init(
        config.num_queries, config.query_dim, FEATURE_DIM, config.embed_dim,
        seed=_derive_seed("init", config.seed) % (2**31), scale=config.init_scale,
    )
    data = training_scenes(config)
    sizes = [len(d) for d in data]
    result = TrainResult(head, table)
    for step in range(config.steps if steps is None else steps):
        d, idx = sample_batch(config, step, sizes)
        spec = config.datasets[d]
        batch = [data[d][i] for i in idx]
        head, lv = train_step(head, batch, spec, table, config.learning_rate)
        result.losses.append(lv.value)
        result.draws.append(d)
        if step % 100 == 0:
            log.debug("step %d dataset %s loss %.4f", step, spec.name, lv.value)
    result.head = head
    result.table = table.with_background(head.background)
    return result


def _panoptic_gt(scene: SyntheticScene, spec: DatasetSpec) -> PanopticOutput:
    masks = [g.dense_mask for g in scene.gt]
    cats = [g.category_id for g in scene.gt]
    return PanopticOutput.from_masks(masks, cats, [spec.is_thing(c) for c in cats])


def _semantic_gt(scene: SyntheticScene) -> SemanticOutput:
    label = np.full((scene.height, scene.width), -1, dtype=np.int64)
    for g in scene.gt:
        label[g.dense_mask] = g.category_id
    return SemanticOutput(label)


def evaluation_scenes(config: TrainConfig, spec: DatasetSpec) -> list[SyntheticScene]:
    return synth_generate(
        KIND_OF_TASK[spec.task], config.eval_scenes, config.eval_seed, config.image_size, spec.name
    )


def evaluate(head: ToyHead, table: EmbeddingTable, config: TrainConfig, datasets=None) -> dict[str, MetricReport]:
    """PQ for panoptic, mIoU for semantic and mask AP (against hidden masks) for box datasets."""
    reports = {}
    for spec in datasets or config.datasets:
        scenes = evaluation_scenes(config, spec)
        props = [forward(head, s.image_features, table, spec) for s in scenes]
        if spec.task == "panoptic":
            pairs = [
                (panoptic_infer(p, spec, config.panoptic_conf_threshold), _panoptic_gt(s, spec))
                for p, s in zip(props, scenes)
            ]
            reports[spec.name] = panoptic_quality(pairs, spec.vocabulary, spec.thing_categories)
        elif spec.task == "semantic":
            reports[spec.name] = mean_iou(
                [(semantic_infer(p, spec), _semantic_gt(s)) for p, s in zip(props, scenes)]
            )
        else:
            preds = [instance_infer(p, spec) for p in props]
            truth = [s.hidden if s.hidden else s.gt for s in scenes]
            reports[spec.name] = mask_ap(preds, truth)
    return reports


def run_experiment(config: TrainConfig) -> dict[str, MetricReport]:
    result = train(config)
    return evaluate(result.head, result.table, config)


def transfer_study(config: TrainConfig, seeds: Sequence[int]) -> list[dict]:
    """Co-training versus single-dataset training at matched per-dataset budgets.

    For each seed, the co-trained model is compared against a model trained on
    only the box-supervised dataset and one trained on only the semantic
    dataset; each baseline gets exactly as many steps as the co-training run
    spent on its dataset.
    """
    rows = []
    for seed in seeds:
        cfg = replace(config, seed=seed)
        co = train(cfg)
        co_reports = evaluate(co.head, co.table, cfg)
        draws = co.draws_per_dataset(len(cfg.datasets))
        row = {"seed": seed, "cotrained": {k: v.overall for k, v in co_reports.items()}, "single": {}}
        for i, spec in enumerate(cfg.datasets):
            if spec.task not in ("instance_box", "semantic"):
                continue
            solo_cfg = replace(cfg, datasets=(spec,), steps=draws[i])
            solo = train(solo_cfg)
            row["single"][spec.name] = evaluate(solo.head, solo.table, solo_cfg)[spec.name].overall
        rows.append(row)
    return rows
