#!/usr/bin/env python3
"""
atnbreak - task-agnostic adversarial attacks on vision transformers

Crafts L-infinity bounded perturbations from a backbone's own attention maps
and embedding, with no labels or task heads involved, and measures how much
they degrade classification, retrieval and dense prediction. Everything runs
at desk scale: a float64 numpy autodiff engine, a small ViT and a synthetic
shape dataset.

Usage:
    python -m atnbreak train --seed 0 --out out/model.ckpt
    python -m atnbreak eval --model out/model.ckpt --task compare --out out/compare.json
"""

__version__ = "1.0.0"

from .utils import AtnBreakError, get_logger
from .tensor import ComputationRecord, DiffArray, backward
from .vit import ViTConfig, ViTModel, ViTParams, forward, init_params
from .attack import AttackConfig, AttackResult, attack_many, attention_loss, embedding_loss
from .datasets import DatasetSpec, SyntheticDataset, generate_dataset
from .training import TrainConfig, train
from .evaluation import (
    MetricReport,
    attack_success_rate_classification,
    dense_degradation,
    mode_comparison_report,
    retrieval_success_at_k,
    transfer_matrix,
)
from .persistence import read_checkpoint, read_image, read_tensor, write_checkpoint, write_image, write_tensor
from .config import RunConfig, load_run_config

__all__ = [
    "AtnBreakError",
    "get_logger",
    "ComputationRecord",
    "DiffArray",
    "backward",
    "ViTConfig",
    "ViTModel",
    "ViTParams",
    "forward",
    "init_params",
    "AttackConfig",
    "AttackResult",
    "attack_many",
    "attention_loss",
    "embedding_loss",
    "DatasetSpec",
    "SyntheticDataset",
    "generate_dataset",
    "TrainConfig",
    "train",
    "MetricReport",
    "attack_success_rate_classification",
    "dense_degradation",
    "mode_comparison_report",
    "retrieval_success_at_k",
    "transfer_matrix",
    "read_checkpoint",
    "read_image",
    "read_tensor",
    "write_checkpoint",
    "write_image",
    "write_tensor",
    "RunConfig",
    "load_run_config",
]
