#!/usr/bin/env python3
"""
Task-agnostic attention/embedding attack

Crafts an L-infinity bounded perturbation z for one image from the backbone
alone (no labels, no text, no task head):

- attention loss: per-head mean product of clean and adversarial attention
  over the patch-to-patch submatrix (CLS row and column excluded), summed
  over heads; minimised to make the attention orthogonal to the clean one
- embedding loss: Euclidean distance between clean and adversarial
  embeddings; the optimiser maximises it
- combined: alpha * L_atn + beta * (-L_emb), beta = alpha |L_atn / L_emb|
  recomputed every iteration from the current loss values

Each iteration runs AdamW on z and projects it back onto the budget and the
valid pixel range.
"""

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .optim import AdamHyper, AdamMoments, adamw_update
from .tensor import ComputationRecord, DiffArray
from .utils import (
    AttackDivergedError,
    ConfigError,
    ShapeError,
    get_logger,
    parse_fraction,
    run_indexed,
)
from .vit import ViTModel, forward, resolve_layer

logger = get_logger(__name__)

LOSS_MODES = ("atn", "emb", "comb")
INIT_MODES = ("auto", "zero", "uniform")
BETA_GUARD = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    eta: float = 0.01
    iterations: int = 250
    loss_mode: str = "comb"
    target_layer: Union[str, int] = "last"
    alpha: float = 1.0
    seed: int = 0
    init: str = "auto"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "epsilon", parse_fraction(self.epsilon))
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"attack.epsilon must be in [0, 1], got {self.epsilon}")
        if self.eta <= 0:
            raise ConfigError(f"attack.eta must be > 0, got {self.eta}")
        if not isinstance(self.iterations, int) or self.iterations < 1:
            raise ConfigError(f"attack.iterations must be >= 1, got {self.iterations!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"attack.loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if self.init not in INIT_MODES:
            raise ConfigError(f"attack.init must be one of {INIT_MODES}, got {self.init!r}")
        if self.weight_decay < 0:
            raise ConfigError("attack.weight_decay must be >= 0")

    @property
    def adam(self) -> AdamHyper:
        return AdamHyper(self.eta, self.beta1, self.beta2, self.adam_eps, self.weight_decay)

    @property
    def resolved_init(self) -> str:
        # The embedding distance is flat at z = 0, a zero start never moves
        if self.init == "auto":
            return "uniform" if self.loss_mode == "emb" else "zero"
        return self.init

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping, prefix: str = "attack") -> "AttackConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"Unknown config key: {prefix}.{key}")
        return cls(**dict(data))


@dataclass(frozen=True)
class PerturbationState:
    z: np.ndarray
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def start(cls, z: np.ndarray) -> "PerturbationState":
        return cls(np.array(z, dtype=np.float64), np.zeros(z.shape), np.zeros(z.shape), 0)


@dataclass(frozen=True)
class TraceRow:
    iteration: int
    l_atn: float
    l_emb: float
    l_comb: float
    beta: float

    def to_record(self) -> Dict[str, Any]:
        return {
            "iteration": self.iteration,
            "L_atn": self.l_atn,
            "L_emb": self.l_emb,
            "L_comb": self.l_comb,
            "beta": self.beta,
        }


@dataclass
class AttackResult:
    z_star: np.ndarray
    trace: List[TraceRow]
    embedding_distance: float
    attention_overlap: float
    adversarial_image: np.ndarray
    clean_embedding: np.ndarray
    adversarial_embedding: np.ndarray
    config: AttackConfig = field(default_factory=AttackConfig)

    def trace_records(self) -> Iterator[Dict[str, Any]]:
        for row in self.trace:
            yield row.to_record()

    def summary(self) -> Dict[str, Any]:
        return {
            "iterations": len(self.trace),
            "linf": float(np.abs(self.z_star).max()) if self.z_star.size else 0.0,
            "embedding_distance": self.embedding_distance,
            "attention_overlap": self.attention_overlap,
            "final_L_comb": self.trace[-1].l_comb if self.trace else None,
        }


def attention_loss(a_gt, a_adv: DiffArray) -> DiffArray:
    """
    Sum over heads of the mean of A_gt * A_adv on the non-CLS submatrix

    Args:
        a_gt: Clean attention [N_h, N_t, N_t], treated as a constant
        a_adv: Adversarial attention [N_h, N_t, N_t]

    Returns:
        Scalar DiffArray
    """
    gt = a_gt.values if isinstance(a_gt, DiffArray) else np.asarray(a_gt, dtype=np.float64)
    a_adv = T.as_diff(a_adv)
    if gt.shape != a_adv.shape:
        raise ShapeError(f"attention_loss: shapes {gt.shape} and {a_adv.shape} differ")
    if a_adv.ndim != 3 or a_adv.shape[1] != a_adv.shape[2]:
        raise ShapeError(f"attention_loss needs [N_h, N_t, N_t], got {a_adv.shape}")
    n_t = a_adv.shape[1]
    if n_t < 2:
        raise ShapeError("attention_loss needs at least one patch token besides CLS")

    sub = (slice(None), slice(1, None), slice(1, None))
    overlap = T.mul(T.index(a_adv, sub), T.constant(gt[sub]))
    return T.scale(T.reduce_sum(overlap), 1.0 / (n_t - 1) ** 2)


def embedding_loss(e_gt, e_adv: DiffArray) -> DiffArray:
    """||E_gt - E_adv||_2 with E_gt constant"""
    gt = e_gt.values if isinstance(e_gt, DiffArray) else np.asarray(e_gt, dtype=np.float64)
    e_adv = T.as_diff(e_adv)
    if gt.shape != e_adv.shape:
        raise ShapeError(f"embedding_loss: lengths {gt.shape} and {e_adv.shape} differ")
    return T.l2norm(T.sub(e_adv, T.constant(gt)))


def _value(x) -> float:
    return x.item() if isinstance(x, DiffArray) else float(x)


def balance_beta(l_atn, l_emb, alpha: float = 1.0) -> float:
    """beta = alpha |L_atn| / |L_emb|; zero when |L_emb| <= 1e-12"""
    emb = abs(_value(l_emb))
    if emb <= BETA_GUARD:
        return 0.0
    return alpha * abs(_value(l_atn)) / emb


def combined_loss(l_atn, l_emb, alpha: float = 1.0) -> Tuple[DiffArray, float]:
    """
    alpha * L_atn + beta * (-L_emb), beta held constant for the step

    The optimiser minimises this, so the embedding term pushes the distance
    up while beta keeps |alpha L_atn| equal to |beta L_emb|.
    """
    beta = balance_beta(l_atn, l_emb, alpha)
    loss = T.sub(T.scale(l_atn, alpha), T.scale(l_emb, beta))
    return loss, beta


def adamw_step(state: PerturbationState, grad: np.ndarray, cfg: AttackConfig) -> PerturbationState:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.z.shape:
        raise ShapeError(f"Gradient shape {grad.shape} does not match z {state.z.shape}")
    z, moments = adamw_update(state.z, grad, AdamMoments(state.m, state.v, state.t), cfg.adam)
    return PerturbationState(z, moments.m, moments.v, moments.t)


def project(z: np.ndarray, epsilon: float, image: np.ndarray) -> np.ndarray:
    """Clamp z to [-eps, eps], then so that image + z stays in [0, 1]"""
    z = np.asarray(z, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if z.shape != image.shape:
        raise ShapeError(f"project: z {z.shape} and image {image.shape} differ")
    z = np.clip(z, -epsilon, epsilon)
    return np.clip(z, -image, 1.0 - image)


def adversarial_image(image: np.ndarray, z: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(image) + np.asarray(z), 0.0, 1.0)


def sign_noise_baseline(image: np.ndarray, epsilon: float, seed: int) -> np.ndarray:
    """Random +-eps perturbation, projected like an attack iterate"""
    image = np.asarray(image, dtype=np.float64)
    rng = np.random.default_rng(seed)
    signs = np.where(rng.random(image.shape) < 0.5, -1.0, 1.0)
    return project(signs * epsilon, epsilon, image)


def _initial_z(image: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if cfg.resolved_init == "uniform":
        rng = np.random.default_rng(cfg.seed)
        return project(rng.uniform(-cfg.epsilon, cfg.epsilon, image.shape), cfg.epsilon, image)
    return np.zeros(image.shape)


def _objective(
    cfg: AttackConfig, l_atn: DiffArray, l_emb: DiffArray
) -> Tuple[DiffArray, float]:
    if cfg.loss_mode == "atn":
        return T.scale(l_atn, cfg.alpha), 0.0
    if cfg.loss_mode == "emb":
        return T.neg(l_emb), 1.0
    return combined_loss(l_atn, l_emb, cfg.alpha)


def attack(
    image: np.ndarray,
    model: ViTModel,
    cfg: AttackConfig,
    on_iterate: Optional[Callable[[int, np.ndarray], None]] = None,
) -> AttackResult:
    """
    Optimise a perturbation for one image

    Args:
        image: [C, H, W] pixels in [0, 1]
        model: Frozen backbone
        cfg: Attack settings
        on_iterate: Called with (iteration, projected z) after every update

    Returns:
        AttackResult with z*, the per-iteration trace and final diagnostics
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != model.config.image_shape:
        raise ShapeError(f"Image shape {image.shape} does not match model {model.config.image_shape}")
    layer = resolve_layer(cfg.target_layer, model.config.num_layers)
    params = model.params.constants()

    clean = model.forward(image, want_attention=True)
    a_gt = clean.attention.values(layer)
    e_gt = clean.embedding.values

    state = PerturbationState.start(_initial_z(image, cfg))
    trace: List[TraceRow] = []

    for iteration in range(1, cfg.iterations + 1):
        record = ComputationRecord()
        z = record.watch(state.z, "z")
        out = forward(T.add(T.constant(image), z), params, model.config, want_attention=True)

        l_atn = attention_loss(a_gt, out.attention[layer])
        l_emb = embedding_loss(e_gt, out.embedding)
        loss, beta = _objective(cfg, l_atn, l_emb)

        l_comb = loss.item()
        if not np.isfinite(l_comb):
            raise AttackDivergedError(
                f"Non-finite loss at iteration {iteration}: "
                f"L_atn={l_atn.item()}, L_emb={l_emb.item()}"
            )
        trace.append(TraceRow(iteration, l_atn.item(), l_emb.item(), l_comb, beta))

        grads = record.backward(loss)
        state = adamw_step(state, grads[z], cfg)
        state = replace(state, z=project(state.z, cfg.epsilon, image))
        if on_iterate is not None:
            on_iterate(iteration, state.z)

        if iteration % 50 == 0:
            logger.debug(
                f"iter {iteration}: L_atn={trace[-1].l_atn:.6f} "
                f"L_emb={trace[-1].l_emb:.6f} beta={beta:.4f}"
            )

    z_star = state.z
    x_adv = adversarial_image(image, z_star)
    final = model.forward(x_adv, want_attention=True)
    distance = float(np.linalg.norm(final.embedding.values - e_gt))
    overlap = attention_loss(a_gt, final.attention[layer]).item()

    logger.info(
        f"Attack done ({cfg.loss_mode}, eps={cfg.epsilon:.5f}): "
        f"distance={distance:.4f} overlap={overlap:.6f}"
    )

    return AttackResult(
        z_star=z_star,
        trace=trace,
        embedding_distance=distance,
        attention_overlap=overlap,
        adversarial_image=x_adv,
        clean_embedding=np.array(e_gt),
        adversarial_embedding=np.array(final.embedding.values),
        config=cfg,
    )


def attack_many(
    images: Sequence[np.ndarray], model: ViTModel, cfg: AttackConfig, jobs: int = 1
) -> List[AttackResult]:
    """
    Attack every image independently; image i uses seed cfg.seed + i

    Results are index-aligned with the input whatever the worker count.
    """
    arg_sets = [
        (np.asarray(img, dtype=np.float64), model, replace(cfg, seed=cfg.seed + i))
        for i, img in enumerate(images)
    ]
    logger.info(
        f"Attacking {len(arg_sets)} images ({cfg.loss_mode}, eps={cfg.epsilon:.5f}, "
        f"iters={cfg.iterations}, jobs={jobs})"
    )
    return run_indexed(attack, arg_sets, jobs)
