"""Desk-scale multi-dataset co-training on synthetic shape scenes."""

from .head import ToyHead, backward, forward
from .synth import KINDS, SyntheticScene, default_specs, make_scene, synth_generate
from .train import (
    TrainConfig,
    evaluate,
    run_experiment,
    sample_batch,
    scene_loss,
    standard_config,
    train,
    train_step,
    transfer_study,
)

__all__ = [
    "KINDS",
    "SyntheticScene",
    "ToyHead",
    "TrainConfig",
    "backward",
    "default_specs",
    "evaluate",
    "forward",
    "make_scene",
    "run_experiment",
    "sample_batch",
    "scene_loss",
    "standard_config",
    "synth_generate",
    "train",
    "train_step",
    "transfer_study",
]
