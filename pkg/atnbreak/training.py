#!/usr/bin/env python3
"""
Trainer for the toy backbone and its task heads

Joint cross-entropy on the CLS classifier and the per-token dense head,
optimised with the same AdamW math as the attack. Deterministic per seed:
batch order comes from a generator seeded with (seed, epoch).
"""

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import tensor as T
from .datasets import SyntheticDataset
from .optim import AdamHyper, AdamMoments, adamw_update
from .tensor import ComputationRecord
from .utils import ConfigError, JsonlStream, TrainingDivergedError, get_logger
from .vit import HEAD_PREFIX, ViTModel, ViTParams, forward

logger = get_logger(__name__)

HEAD_KINDS = ("classifier", "dense")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    heads: Tuple[str, ...] = HEAD_KINDS
    freeze_backbone: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        heads = tuple(self.heads)
        if not heads or any(h not in HEAD_KINDS for h in heads):
            raise ConfigError(f"train.heads must be a non-empty subset of {HEAD_KINDS}, got {heads}")
        object.__setattr__(self, "heads", heads)

    @property
    def adam(self) -> AdamHyper:
        return AdamHyper(lr=self.lr, weight_decay=self.weight_decay)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["heads"] = list(self.heads)
        return data

    @classmethod
    def from_dict(cls, data: Mapping, prefix: str = "train") -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"Unknown config key: {prefix}.{key}")
        return cls(**dict(data))


@dataclass
class TrainResult:
    model: ViTModel
    history: List[Dict[str, Any]] = field(default_factory=list)
    val_accuracy: Optional[float] = None
    dense_accuracy: Optional[float] = None


def evaluate_heads(model: ViTModel, dataset: SyntheticDataset, split: str = "val") -> Dict[str, float]:
    """Classifier accuracy and per-token dense accuracy on a split"""
    images = dataset.images(split)
    if len(images) == 0 or not model.has_heads:
        return {}
    out = model.run_batched(images)
    labels = dataset.labels(split)
    tokens = dataset.token_labels(split, model.config.patch_size)
    return {
        "accuracy": float(np.mean(out["logits"].argmax(-1) == labels)),
        "dense_accuracy": float(np.mean(out["dense_logits"].argmax(-1) == tokens)),
    }


def _trainable_names(params: ViTParams, hp: TrainConfig) -> List[str]:
    names = params.names()
    if hp.freeze_backbone:
        names = [n for n in names if n.startswith(HEAD_PREFIX)]
    return names


def _batch_loss(out, hp: TrainConfig, labels: np.ndarray, tokens: np.ndarray):
    terms = []
    if "classifier" in hp.heads:
        terms.append(T.cross_entropy(out.logits, labels))
    if "dense" in hp.heads:
        terms.append(T.cross_entropy(out.dense_logits, tokens))
    loss = terms[0]
    for term in terms[1:]:
        loss = T.add(loss, term)
    return loss


def train(
    model: ViTModel,
    dataset: SyntheticDataset,
    hp: TrainConfig,
    log_path: Optional[Path] = None,
    log_header: Optional[Dict[str, Any]] = None,
) -> TrainResult:
    """
    Train backbone and heads with minibatch AdamW

    Args:
        model: Initialised model with heads
        dataset: Synthetic dataset (train split trains, val split reports)
        hp: Training hyperparameters
        log_path: Optional JSON-lines log, streamed one row per epoch; first row is log_header
        log_header: Resolved config echoed as the first log row

    Returns:
        TrainResult with the trained model, per-epoch history and val metrics
    """
    if not model.has_heads:
        raise ConfigError("Training needs a model with classifier and dense heads")
    if dataset.spec.image_size != model.config.image_size or dataset.spec.channels != model.config.channels:
        raise ConfigError(
            f"Dataset images {dataset.spec.channels}x{dataset.spec.image_size} do not match "
            f"model {model.config.image_shape}"
        )
    if dataset.spec.num_classes != model.config.num_classes:
        raise ConfigError(
            f"Dataset has {dataset.spec.num_classes} classes, model head has {model.config.num_classes}"
        )

    cfg = model.config
    params = model.params
    trainable = _trainable_names(params, hp)
    moments = {name: AdamMoments.zeros(params[name].shape) for name in trainable}
    hyper = hp.adam

    images = dataset.images("train")
    labels = dataset.labels("train")
    tokens = dataset.token_labels("train", cfg.patch_size)
    n = len(images)

    history: List[Dict[str, Any]] = []
    logger.info(
        f"Training {len(trainable)} tensors on {n} samples: epochs={hp.epochs} "
        f"batch={hp.batch_size} lr={hp.lr} heads={list(hp.heads)}"
    )

    stream = JsonlStream(log_path) if log_path is not None else None
    try:
        if stream is not None:
            stream.write(log_header if log_header is not None else {"train": hp.to_dict(), "model": cfg.to_dict()})

        for epoch in range(1, hp.epochs + 1):
            order = np.random.default_rng([hp.seed, epoch]).permutation(n)
            losses = []
            for batch_no, start in enumerate(range(0, n, hp.batch_size), start=1):
                idx = order[start:start + hp.batch_size]
                record = ComputationRecord()
                bound = params.bind(record, trainable)
                out = forward(images[idx], bound, cfg, want_attention=False)
                loss = _batch_loss(out, hp, labels[idx], tokens[idx])

                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"Non-finite training loss at epoch {epoch}, batch {batch_no}: {value}"
                    )
                losses.append(value)

                grads = record.backward(loss)
                updates = {}
                for name in trainable:
                    updates[name], moments[name] = adamw_update(
                        params[name], grads[bound[name]], moments[name], hyper
                    )
                params = params.replace(updates)

            metrics = evaluate_heads(ViTModel(cfg, params), dataset)
            row = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else 0.0, **metrics}
            history.append(row)
            if stream is not None:
                stream.write(row)
            logger.info(
                f"Epoch {epoch}/{hp.epochs}: loss={row['loss']:.4f} "
                f"val_acc={metrics.get('accuracy', float('nan')):.4f} "
                f"dense_acc={metrics.get('dense_accuracy', float('nan')):.4f}"
            )
    finally:
        if stream is not None:
            stream.close()

    trained = ViTModel(cfg, params)
    final = history[-1] if history else evaluate_heads(trained, dataset)

    return TrainResult(
        model=trained,
        history=history,
        val_accuracy=final.get("accuracy"),
        dense_accuracy=final.get("dense_accuracy"),
    )
