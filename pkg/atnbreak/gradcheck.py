#!/usr/bin/env python3
"""
Central finite-difference checks for the tensor engine

Compares the reverse-mode gradient of a scalar function against
(f(x + h) - f(x - h)) / 2h, entry by entry, in float64.
"""

from typing import Callable, Dict, Mapping

import numpy as np

from .tensor import ComputationRecord, DiffArray
from .utils import get_logger

logger = get_logger(__name__)

DEFAULT_STEP = 1e-5

LossBuilder = Callable[[Dict[str, DiffArray]], DiffArray]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(max |a|, max |n|, 1e-12)"""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def analytic_gradients(
    build_loss: LossBuilder, inputs: Mapping[str, np.ndarray]
) -> Dict[str, np.ndarray]:
    record = ComputationRecord()
    watched = {name: record.watch(value, name) for name, value in inputs.items()}
    loss = build_loss(watched)
    grads = record.backward(loss)
    return {name: grads[arr] for name, arr in watched.items()}


def _evaluate(build_loss: LossBuilder, inputs: Mapping[str, np.ndarray]) -> float:
    # No record: pure forward on constants
    loss = build_loss({name: DiffArray(np.array(v)) for name, v in inputs.items()})
    return loss.item()


def numeric_gradients(
    build_loss: LossBuilder,
    inputs: Mapping[str, np.ndarray],
    step: float = DEFAULT_STEP,
) -> Dict[str, np.ndarray]:
    base = {name: np.array(value, dtype=np.float64) for name, value in inputs.items()}
    numeric: Dict[str, np.ndarray] = {}

    for name, value in base.items():
        grad = np.zeros_like(value)
        flat = value.reshape(-1)
        grad_flat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            f_plus = _evaluate(build_loss, base)
            flat[i] = original - step
            f_minus = _evaluate(build_loss, base)
            flat[i] = original
            grad_flat[i] = (f_plus - f_minus) / (2.0 * step)
        numeric[name] = grad

    return numeric


def check_gradients(
    build_loss: LossBuilder,
    inputs: Mapping[str, np.ndarray],
    step: float = DEFAULT_STEP,
) -> Dict[str, float]:
    """
    Relative error between analytic and central-difference gradients

    Args:
        build_loss: Maps named DiffArrays to a scalar loss
        inputs: Named float64 arrays to differentiate against
        step: Finite-difference step h

    Returns:
        Relative error per input name
    """
    analytic = analytic_gradients(build_loss, inputs)
    numeric = numeric_gradients(build_loss, inputs, step)
    errors = {name: relative_error(analytic[name], numeric[name]) for name in inputs}
    logger.debug(f"Gradient check errors: {errors}")
    return errors
