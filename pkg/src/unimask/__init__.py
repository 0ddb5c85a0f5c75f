"""Universal mask-proposal segmentation: MERGE ops, set-matching losses,
post-processing, metrics and a toy multi-dataset co-training harness."""

__version__ = "0.1.0"
