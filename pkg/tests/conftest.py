"""Shared fixtures: a tiny 2-layer/2-head model and a small synthetic dataset"""

import os

import numpy as np
import pytest

# Console logging only while testing
os.environ.setdefault("ATNBREAK_LOG_DIR", "")

from atnbreak.datasets import DatasetSpec, generate_dataset
from atnbreak.vit import ViTConfig, ViTModel, ViTParams, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    # 3x3 patch grid + CLS = 10 tokens
    return ViTConfig(
        image_size=12,
        patch_size=4,
        channels=1,
        embed_dim=8,
        num_heads=2,
        num_layers=2,
        mlp_ratio=2,
        num_classes=4,
    )


@pytest.fixture
def tiny_model(tiny_config):
    return ViTModel(tiny_config, init_params(tiny_config, seed=0))


@pytest.fixture
def rough_model(tiny_config):
    """Tiny model with O(1) weights so attention is far from uniform"""
    rng = np.random.default_rng(7)
    base = init_params(tiny_config, seed=0)
    tensors = {}
    for name, value in base.items():
        if name.endswith(".gain"):
            tensors[name] = 1.0 + 0.1 * rng.normal(size=value.shape)
        else:
            tensors[name] = 0.5 * rng.normal(size=value.shape)
    return ViTModel(tiny_config, ViTParams(tensors))


@pytest.fixture
def tiny_image(rng, tiny_config):
    return rng.uniform(0.1, 0.9, size=tiny_config.image_shape)


@pytest.fixture
def tiny_dataset():
    return generate_dataset(DatasetSpec(seed=3, image_size=12, train_size=40, val_size=16))
