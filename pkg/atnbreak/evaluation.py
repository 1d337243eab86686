#!/usr/bin/env python3
"""
Attack-success metrics and reports

Classification ASR, retrieval success@K, dense per-token accuracy and mIoU,
the 3x3 mode comparison, the cross-model transfer matrix and two sweeps
(epsilon budget, target layer). Every attacked metric is reported next to
the random sign-noise control at the same budget.
"""

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .attack import LOSS_MODES, AttackConfig, adversarial_image, attack_many, sign_noise_baseline
from .datasets import SyntheticDataset, select_eligible
from .utils import EvaluationError, fingerprint, get_logger
from .vit import ViTModel

logger = get_logger(__name__)

RETRIEVAL_KS = (1, 5, 10)
SWEEP_EPSILONS = ("2/255", "4/255", "8/255", "12/255")
TASKS = ("classification", "retrieval", "dense")


@dataclass
class MetricReport:
    metric: str
    value: float
    n: int
    config_fingerprint: str
    details: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value) or not 0.0 <= self.value <= 1.0:
            raise EvaluationError(f"Metric {self.metric} value {self.value} outside [0, 1]")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def config_fingerprint(model: ViTModel, attack_cfg: AttackConfig, dataset: Optional[SyntheticDataset] = None) -> str:
    sections = {"model": model.config.to_dict(), "attack": attack_cfg.to_dict()}
    if dataset is not None:
        sections["dataset"] = dataset.spec.to_dict()
    return fingerprint(sections)


def _require_heads(model: ViTModel, task: str) -> None:
    if not model.has_heads:
        raise EvaluationError(f"Task {task} needs a model with task heads")


# ---------------------------------------------------------------------------
# Pure metrics
# ---------------------------------------------------------------------------


def attack_success_rate(clean_pred, adv_pred, labels) -> Tuple[float, int]:
    """
    Fraction of clean-correct samples that the attack flips

    Returns:
        Tuple of (rate, eligible count)
    """
    clean_pred = np.asarray(clean_pred)
    adv_pred = np.asarray(adv_pred)
    labels = np.asarray(labels)
    eligible = select_eligible(clean_pred, labels)
    if eligible.size == 0:
        raise EvaluationError("No correctly classified clean images: ASR denominator is empty")
    flipped = int(np.sum(adv_pred[eligible] != labels[eligible]))
    return flipped / eligible.size, int(eligible.size)


def cosine_similarity(queries: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """[Q, G] cosine similarities; zero vectors score 0 against everything"""

    def _unit(x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)

    return _unit(queries) @ _unit(gallery).T


def success_at_k(query_emb, gallery_emb, true_index, k: int) -> float:
    """
    Fraction of queries whose true gallery item is not in the top-k

    An item's rank is the number of gallery items strictly more similar to
    the query, so ties never push the true item out.
    """
    gallery_emb = np.atleast_2d(np.asarray(gallery_emb, dtype=np.float64))
    true_index = np.atleast_1d(np.asarray(true_index, dtype=np.int64))
    if k < 1:
        raise EvaluationError(f"k must be >= 1, got {k}")
    if k > len(gallery_emb):
        raise EvaluationError(f"k={k} exceeds gallery size {len(gallery_emb)}")
    if true_index.size == 0:
        raise EvaluationError("No retrieval queries")

    sims = cosine_similarity(query_emb, gallery_emb)
    rows = np.arange(len(true_index))
    true_sim = sims[rows, true_index]
    rank = np.sum(sims > true_sim[:, None], axis=1)
    return float(np.mean(rank >= k))


def confusion_matrix(pred, true, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    true = np.asarray(true, dtype=np.int64).reshape(-1)
    return np.bincount(true * num_classes + pred, minlength=num_classes**2).reshape(
        num_classes, num_classes
    )


def mean_iou(pred, true, num_classes: int) -> float:
    """
    IoU = TP / (TP + FP + FN) per class, averaged over classes with a non-empty union

    Predicting one class everywhere on K balanced classes scores 1/K for that
    class and 0 for the rest, so the mean is 1/K^2, not 1/K.
    """
    cm = confusion_matrix(pred, true, num_classes).astype(np.float64)
    tp = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        return 0.0
    return float(np.mean(tp[present] / union[present]))


def token_accuracy(pred, true) -> float:
    pred = np.asarray(pred)
    true = np.asarray(true)
    return float(np.mean(pred == true)) if true.size else 0.0


# ---------------------------------------------------------------------------
# Perturbation sets shared by the tasks
# ---------------------------------------------------------------------------


@dataclass
class PerturbedSet:
    """One attack per image, plus the sign-noise control at the same budget"""

    clean: np.ndarray
    adversarial: np.ndarray
    control: np.ndarray
    config: AttackConfig


def perturb(model: ViTModel, images: np.ndarray, attack_cfg: AttackConfig, jobs: int = 1) -> PerturbedSet:
    images = np.asarray(images, dtype=np.float64)
    results = attack_many(images, model, attack_cfg, jobs)
    adversarial = np.stack([r.adversarial_image for r in results]) if results else images.copy()
    control = np.stack([
        adversarial_image(img, sign_noise_baseline(img, attack_cfg.epsilon, attack_cfg.seed + i))
        for i, img in enumerate(images)
    ]) if len(images) else images.copy()
    return PerturbedSet(images, adversarial, control, attack_cfg)


def classification_report(
    model: ViTModel, perturbed: PerturbedSet, labels, config_fp: str
) -> MetricReport:
    _require_heads(model, "classification")
    labels = np.asarray(labels)
    clean_pred = model.predict(perturbed.clean)
    adv_pred = model.predict(perturbed.adversarial)
    ctrl_pred = model.predict(perturbed.control)

    asr, n = attack_success_rate(clean_pred, adv_pred, labels)
    control_asr, _ = attack_success_rate(clean_pred, ctrl_pred, labels)
    eligible = select_eligible(clean_pred, labels)
    adv_flip = adv_pred[eligible] != labels[eligible]
    ctrl_flip = ctrl_pred[eligible] != labels[eligible]

    return MetricReport(
        metric="classification.asr",
        value=asr,
        n=n,
        config_fingerprint=config_fp,
        details={
            "clean_accuracy": token_accuracy(clean_pred, labels),
            "adversarial_accuracy": token_accuracy(adv_pred, labels),
            "control_asr": control_asr,
            "attack_dominates_control": float(np.mean(adv_flip >= ctrl_flip)),
        },
    )


def retrieval_reports(
    model: ViTModel,
    perturbed: PerturbedSet,
    config_fp: str,
    ks: Sequence[int] = RETRIEVAL_KS,
    queries: Optional[np.ndarray] = None,
) -> List[MetricReport]:
    """success@k for every k; queries default to the clean gallery embeddings"""
    clean_emb = model.embed(perturbed.clean)
    adv_emb = model.embed(perturbed.adversarial)
    ctrl_emb = model.embed(perturbed.control)
    queries = clean_emb if queries is None else np.asarray(queries, dtype=np.float64)
    truth = np.arange(len(queries))

    reports = []
    for k in ks:
        reports.append(MetricReport(
            metric=f"retrieval.success@{k}",
            value=success_at_k(queries, adv_emb, truth, k),
            n=len(queries),
            config_fingerprint=config_fp,
            details={"control": success_at_k(queries, ctrl_emb, truth, k), "gallery_size": len(adv_emb)},
        ))
    return reports


def dense_reports(
    model: ViTModel, perturbed: PerturbedSet, tokens, config_fp: str
) -> Tuple[MetricReport, MetricReport]:
    _require_heads(model, "dense")
    tokens = np.asarray(tokens)
    k = model.config.dense_classes
    clean_pred = model.predict_dense(perturbed.clean)
    adv_pred = model.predict_dense(perturbed.adversarial)
    ctrl_pred = model.predict_dense(perturbed.control)

    clean_acc = token_accuracy(clean_pred, tokens)
    adv_acc = token_accuracy(adv_pred, tokens)
    n = int(tokens.size)
    clean = MetricReport(
        metric="dense.clean",
        value=clean_acc,
        n=n,
        config_fingerprint=config_fp,
        details={"miou": mean_iou(clean_pred, tokens, k)},
    )
    attacked = MetricReport(
        metric="dense.attacked",
        value=adv_acc,
        n=n,
        config_fingerprint=config_fp,
        details={
            "miou": mean_iou(adv_pred, tokens, k),
            "accuracy_drop": clean_acc - adv_acc,
            "control_accuracy": token_accuracy(ctrl_pred, tokens),
            "control_miou": mean_iou(ctrl_pred, tokens, k),
        },
    )
    return clean, attacked


# ---------------------------------------------------------------------------
# Task protocols
# ---------------------------------------------------------------------------


def eligible_images(model: ViTModel, dataset: SyntheticDataset, count: int, split: str = "val"):
    """First `count` clean-correct images of a split, with their labels"""
    _require_heads(model, "classification")
    images = dataset.images(split)
    labels = dataset.labels(split)
    eligible = select_eligible(model.predict(images), labels)[:count]
    if eligible.size == 0:
        raise EvaluationError("No correctly classified clean images: ASR denominator is empty")
    if eligible.size < count:
        logger.warning(f"Only {eligible.size} eligible images in {split} (wanted {count})")
    return images[eligible], labels[eligible]


def attack_success_rate_classification(
    model: ViTModel,
    dataset: SyntheticDataset,
    attack_cfg: AttackConfig,
    count: int = 100,
    jobs: int = 1,
) -> MetricReport:
    """ASR over the first `count` clean-correct val images"""
    images, labels = eligible_images(model, dataset, count)
    logger.info(f"Classification ASR on {len(images)} eligible images")
    perturbed = perturb(model, images, attack_cfg, jobs)
    return classification_report(model, perturbed, labels, config_fingerprint(model, attack_cfg, dataset))


def retrieval_success_at_k(
    model: ViTModel,
    gallery_images: np.ndarray,
    attack_cfg: AttackConfig,
    ks: Union[int, Sequence[int]] = RETRIEVAL_KS,
    queries: Optional[np.ndarray] = None,
    jobs: int = 1,
    dataset: Optional[SyntheticDataset] = None,
) -> List[MetricReport]:
    """
    Attack every gallery image and measure how often the true item leaves the top-k

    Args:
        model: Backbone (no heads needed)
        gallery_images: One image per gallery item
        attack_cfg: Attack settings
        ks: One k or several; every k must fit the gallery
        queries: Query embeddings aligned with the gallery (default: clean gallery embeddings)
        jobs: Worker processes

    Returns:
        One MetricReport per k
    """
    ks = (ks,) if isinstance(ks, int) else tuple(ks)
    for k in ks:
        if k > len(gallery_images):
            raise EvaluationError(f"k={k} exceeds gallery size {len(gallery_images)}")
    logger.info(f"Retrieval success@{list(ks)} on a {len(gallery_images)}-item gallery")
    perturbed = perturb(model, gallery_images, attack_cfg, jobs)
    return retrieval_reports(model, perturbed, config_fingerprint(model, attack_cfg, dataset), ks, queries)


def dense_degradation(
    model: ViTModel,
    dataset: SyntheticDataset,
    attack_cfg: AttackConfig,
    count: int = 100,
    jobs: int = 1,
) -> Tuple[MetricReport, MetricReport]:
    """(clean, attacked) per-token accuracy with mIoU in details"""
    _require_heads(model, "dense")
    images = dataset.images("val", count)
    tokens = dataset.token_labels("val", model.config.patch_size, count)
    logger.info(f"Dense degradation on {len(images)} images")
    perturbed = perturb(model, images, attack_cfg, jobs)
    return dense_reports(model, perturbed, tokens, config_fingerprint(model, attack_cfg, dataset))


def mode_comparison_report(
    model: ViTModel,
    dataset: SyntheticDataset,
    attack_cfg: AttackConfig,
    count: int = 64,
    jobs: int = 1,
) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    """
    Degradation of every task under every loss mode

    One perturbation per image and mode serves all three tasks. Cells:
    classification ASR, retrieval success@1, dense per-token accuracy drop.

    Returns:
        Tuple of (3x3 DataFrame tasks x modes, details per cell)
    """
    _require_heads(model, "compare")
    images = dataset.images("val", count)
    labels = dataset.labels("val", count)
    tokens = dataset.token_labels("val", model.config.patch_size, count)

    grid = pd.DataFrame(index=list(TASKS), columns=list(LOSS_MODES), dtype=float)
    details: Dict[str, Any] = {}
    for mode in LOSS_MODES:
        cfg = replace(attack_cfg, loss_mode=mode)
        fp = config_fingerprint(model, cfg, dataset)
        logger.info(f"Mode comparison: attacking {len(images)} images with loss={mode}")
        perturbed = perturb(model, images, cfg, jobs)

        cls_report = classification_report(model, perturbed, labels, fp)
        ret_report = retrieval_reports(model, perturbed, fp, ks=(1,))[0]
        _, dense_report = dense_reports(model, perturbed, tokens, fp)

        grid.loc["classification", mode] = cls_report.value
        grid.loc["retrieval", mode] = ret_report.value
        grid.loc["dense", mode] = dense_report.details["accuracy_drop"]
        details[mode] = {
            "classification": cls_report.to_dict(),
            "retrieval": ret_report.to_dict(),
            "dense": dense_report.to_dict(),
        }

    # Reported, not asserted
    comb_holds = int(sum(
        grid.loc[task, "comb"] >= min(grid.loc[task, "atn"], grid.loc[task, "emb"]) for task in TASKS
    ))
    details["comb_at_least_min_tasks"] = comb_holds
    if comb_holds < 2:
        logger.warning(f"comb >= min(atn, emb) held on only {comb_holds}/3 tasks")
    return grid, details


def _check_compatible(models: Sequence[ViTModel]) -> None:
    shapes = {m.config.image_shape for m in models}
    if len(shapes) > 1:
        raise EvaluationError(f"Models disagree on image shape: {sorted(shapes)}")


def transfer_matrix(
    sources: Sequence[ViTModel],
    targets: Sequence[ViTModel],
    dataset: SyntheticDataset,
    attack_cfg: AttackConfig,
    count: int = 100,
    jobs: int = 1,
    source_names: Optional[Sequence[str]] = None,
    target_names: Optional[Sequence[str]] = None,
) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    ASR of perturbations crafted on each source, evaluated on each target

    Each target's denominator is its own clean-correct subset of the shared
    image set, so the diagonal is the white-box ASR.

    Returns:
        Tuple of (attack ASR matrix, sign-noise control ASR matrix), sources x targets
    """
    if not sources or not targets:
        raise EvaluationError("Transfer needs at least one source and one target model")
    _check_compatible(list(sources) + list(targets))
    for m in list(sources) + list(targets):
        _require_heads(m, "transfer")

    source_names = list(source_names or [f"source{i}" for i in range(len(sources))])
    target_names = list(target_names or [f"target{j}" for j in range(len(targets))])
    images = dataset.images("val", count)
    labels = dataset.labels("val", count)
    clean_preds = [target.predict(images) for target in targets]

    matrix = pd.DataFrame(index=source_names, columns=target_names, dtype=float)
    control = pd.DataFrame(index=source_names, columns=target_names, dtype=float)
    for s_name, source in zip(source_names, sources):
        logger.info(f"Transfer: crafting {len(images)} perturbations on {s_name}")
        perturbed = perturb(source, images, attack_cfg, jobs)
        for t_name, target, clean_pred in zip(target_names, targets, clean_preds):
            asr, _ = attack_success_rate(clean_pred, target.predict(perturbed.adversarial), labels)
            control_asr, _ = attack_success_rate(clean_pred, target.predict(perturbed.control), labels)
            matrix.loc[s_name, t_name] = asr
            control.loc[s_name, t_name] = control_asr
    return matrix, control


def epsilon_sweep(
    model: ViTModel,
    dataset: SyntheticDataset,
    attack_cfg: AttackConfig,
    epsilons: Sequence[Union[str, float]] = SWEEP_EPSILONS,
    count: int = 100,
    jobs: int = 1,
) -> pd.DataFrame:
    """Classification ASR and control ASR per budget"""
    images, labels = eligible_images(model, dataset, count)
    rows = []
    for eps in epsilons:
        cfg = replace(attack_cfg, epsilon=eps)
        report = classification_report(
            model, perturb(model, images, cfg, jobs), labels, config_fingerprint(model, cfg, dataset)
        )
        rows.append({
            "epsilon": str(eps),
            "asr": report.value,
            "control_asr": report.details["control_asr"],
            "n": report.n,
        })
        logger.info(f"Sweep eps={eps}: asr={report.value:.3f}")
    return pd.DataFrame(rows, columns=["epsilon", "asr", "control_asr", "n"])


def layer_ablation(
    model: ViTModel,
    dataset: SyntheticDataset,
    attack_cfg: AttackConfig,
    count: int = 64,
    jobs: int = 1,
) -> pd.DataFrame:
    """Classification ASR and dense accuracy drop when targeting each layer"""
    _require_heads(model, "layers")
    images = dataset.images("val", count)
    labels = dataset.labels("val", count)
    tokens = dataset.token_labels("val", model.config.patch_size, count)
    rows = []
    for layer in range(1, model.config.num_layers + 1):
        cfg = replace(attack_cfg, target_layer=layer)
        fp = config_fingerprint(model, cfg, dataset)
        perturbed = perturb(model, images, cfg, jobs)
        cls_report = classification_report(model, perturbed, labels, fp)
        _, dense_report = dense_reports(model, perturbed, tokens, fp)
        rows.append({
            "layer": layer,
            "asr": cls_report.value,
            "dense_drop": dense_report.details["accuracy_drop"],
        })
        logger.info(f"Layer {layer}: asr={cls_report.value:.3f} dense_drop={rows[-1]['dense_drop']:.3f}")
    return pd.DataFrame(rows, columns=["layer", "asr", "dense_drop"])


# ---------------------------------------------------------------------------
# Report output
# ---------------------------------------------------------------------------


def reports_table(reports: Sequence[MetricReport]) -> pd.DataFrame:
    return pd.DataFrame(
        [{"metric": r.metric, "value": r.value, "n": r.n, "config_fingerprint": r.config_fingerprint} for r in reports],
        columns=["metric", "value", "n", "config_fingerprint"],
    )


def frame_to_records(frame: pd.DataFrame) -> Dict[str, Any]:
    """DataFrame -> JSON-ready dict (index kept, floats as Python floats)"""
    return json.loads(frame.to_json(orient="split", double_precision=15))


def write_report(path, payload: Dict[str, Any], table: pd.DataFrame) -> Tuple[Path, Path]:
    """
    Write a report as JSON plus an aligned text table next to it

    Returns:
        Tuple of (json path, text path)
    """
    from .persistence import atomic_write_bytes

    path = Path(path)
    text_path = path.with_suffix(".txt")
    body = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    atomic_write_bytes(path, body.encode("utf-8"))
    atomic_write_bytes(text_path, (table.to_string() + "\n").encode("utf-8"))
    logger.info(f"Report written to {path} and {text_path}")
    return path, text_path
