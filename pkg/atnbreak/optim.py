#!/usr/bin/env python3
"""
AdamW with bias correction and decoupled weight decay

Shared by the perturbation optimiser and the trainer. Pure functions: the
moment buffers are returned, never updated in place.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass(frozen=True)
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> "AdamMoments":
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adamw_update(
    param: np.ndarray, grad: np.ndarray, moments: AdamMoments, hyper: AdamHyper
) -> Tuple[np.ndarray, AdamMoments]:
    """
    One AdamW step

    Args:
        param: Current value
        grad: Gradient of the objective at param
        moments: First/second moments and step counter
        hyper: Learning rate, betas, eps, weight decay

    Returns:
        Tuple of (new param, new moments)
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape:
        raise ValueError(f"Gradient shape {grad.shape} does not match {param.shape}")

    t = moments.t + 1
    m = hyper.beta1 * moments.m + (1.0 - hyper.beta1) * grad
    v = hyper.beta2 * moments.v + (1.0 - hyper.beta2) * grad * grad
    m_hat = m / (1.0 - hyper.beta1**t)
    v_hat = v / (1.0 - hyper.beta2**t)

    # Decoupled decay acts on the parameter, not on the gradient
    decayed = param - hyper.lr * hyper.weight_decay * param
    new_param = decayed - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)

    return new_param, AdamMoments(m, v, t)
