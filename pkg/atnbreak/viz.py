#!/usr/bin/env python3
"""
CLS attention heatmaps for clean and perturbed images
"""

from typing import Optional, Tuple, Union

import numpy as np

from .attack import adversarial_image
from .utils import ShapeError, get_logger
from .vit import ViTModel, resolve_layer

logger = get_logger(__name__)


def cls_attention_map(model: ViTModel, image: np.ndarray, layer: Union[str, int] = "last") -> np.ndarray:
    """CLS row of one layer, averaged over heads, CLS column dropped, on the patch grid"""
    idx = resolve_layer(layer, model.config.num_layers)
    attn = model.forward(image, want_attention=True).attention.values(idx)
    cls_row = attn[:, 0, 1:].mean(axis=0)
    g = model.config.grid_size
    return cls_row.reshape(g, g)


def upsample_nearest(grid_map: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(grid_map, factor, axis=0), factor, axis=1)


def normalize_minmax(values: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant map becomes all zeros"""
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0.0:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def heatmap(model: ViTModel, image: np.ndarray, layer: Union[str, int] = "last") -> np.ndarray:
    """[1, H, W] heatmap in [0, 1], ready for write_image"""
    grid_map = cls_attention_map(model, image, layer)
    full = upsample_nearest(grid_map, model.config.patch_size)
    return normalize_minmax(full)[None]


def render_heatmaps(
    model: ViTModel,
    image: np.ndarray,
    z: Optional[np.ndarray] = None,
    layer: Union[str, int] = "last",
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Heatmaps of the clean image and of clip(image + z)

    Args:
        model: Backbone
        image: [C, H, W] clean image
        z: Perturbation of the same shape (None or zeros: identical maps)
        layer: 1-based layer or "last"

    Returns:
        Tuple of (clean heatmap, perturbed heatmap), each [1, H, W]
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != model.config.image_shape:
        raise ShapeError(f"Image shape {image.shape} does not match model {model.config.image_shape}")
    if z is None:
        z = np.zeros_like(image)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != image.shape:
        raise ShapeError(f"Perturbation shape {z.shape} does not match image shape {image.shape}")

    clean = heatmap(model, image, layer)
    perturbed = heatmap(model, adversarial_image(image, z), layer)
    logger.debug(f"Heatmaps rendered, mean abs difference {np.abs(clean - perturbed).mean():.4f}")
    return clean, perturbed
