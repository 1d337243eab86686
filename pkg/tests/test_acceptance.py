"""Full-size runs on the default toy backbone; deselected unless -m slow"""

import numpy as np
import pytest

from atnbreak.attack import (
    LOSS_MODES,
    AttackConfig,
    adversarial_image,
    attack,
    attack_many,
    attention_loss,
    sign_noise_baseline,
)
from atnbreak.datasets import DatasetSpec, generate_dataset
from atnbreak.evaluation import (
    attack_success_rate_classification,
    dense_degradation,
    mode_comparison_report,
    retrieval_success_at_k,
    transfer_matrix,
)
from atnbreak.training import TrainConfig, train
from atnbreak.utils import resolve_jobs
from atnbreak.vit import ViTConfig, ViTModel, resolve_layer

pytestmark = pytest.mark.slow

EPS = 8 / 255
ORACLE_IMAGES = 100


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(DatasetSpec(seed=0))


@pytest.fixture(scope="module")
def jobs():
    return resolve_jobs(None)


def _trained(dataset, seed):
    model = ViTModel.initialise(ViTConfig(), seed=seed)
    return train(model, dataset, TrainConfig(epochs=30, seed=seed)).model


@pytest.fixture(scope="module")
def model(dataset):
    return _trained(dataset, 0)


@pytest.fixture(scope="module")
def second_model(dataset):
    return _trained(dataset, 1)


def _noise_outputs(model, images, cfg):
    """Forward outputs on x + sign noise, with the seeds attack_many uses"""
    outputs = []
    for i, image in enumerate(images):
        noisy = adversarial_image(image, sign_noise_baseline(image, cfg.epsilon, cfg.seed + i))
        outputs.append(model.forward(noisy, want_attention=True))
    return outputs


def test_classification_attack_beats_noise(model, dataset, jobs):
    report = attack_success_rate_classification(model, dataset, AttackConfig(loss_mode="comb"), count=100, jobs=jobs)
    assert report.n == 100
    assert report.value >= 0.95
    assert report.details["control_asr"] < 0.30


def test_retrieval_embedding_mode(model, dataset, jobs):
    gallery = dataset.images("val", 64)
    emb = retrieval_success_at_k(model, gallery, AttackConfig(loss_mode="emb"), ks=(1,), jobs=jobs)[0]
    atn = retrieval_success_at_k(model, gallery, AttackConfig(loss_mode="atn"), ks=(1,), jobs=jobs)[0]
    assert emb.value >= 0.90
    assert emb.value >= atn.value


def test_dense_accuracy_drop(model, dataset, jobs):
    clean, attacked = dense_degradation(model, dataset, AttackConfig(loss_mode="atn"), count=100, jobs=jobs)
    assert clean.value >= 0.90
    assert clean.value - attacked.value >= 0.30


def test_mode_grid_is_complete(model, dataset, jobs):
    grid, details = mode_comparison_report(model, dataset, AttackConfig(), count=64, jobs=jobs)
    assert grid.shape == (3, 3)
    assert np.all(np.isfinite(grid.to_numpy(dtype=float)))
    assert set(LOSS_MODES) <= set(details)


def test_transfer_is_weaker_than_white_box(model, second_model, dataset, jobs):
    models = [model, second_model]
    matrix, control = transfer_matrix(models, models, dataset, AttackConfig(), count=100, jobs=jobs)
    values = matrix.to_numpy(dtype=float)
    for i in range(2):
        assert values[i, i] >= 0.95
        for j in range(2):
            if i != j:
                assert values[i, j] < values[i, i]
    assert np.all(control.to_numpy(dtype=float) < np.diag(values).min())


def test_embedding_mode_moves_further_than_noise(model, dataset, jobs):
    images = dataset.images("val", ORACLE_IMAGES)
    cfg = AttackConfig(loss_mode="emb")
    results = attack_many(images, model, cfg, jobs)
    noise = _noise_outputs(model, images, cfg)
    wins = sum(
        r.embedding_distance > np.linalg.norm(n.embedding.values - r.clean_embedding)
        for r, n in zip(results, noise)
    )
    assert wins >= 95


def test_attention_mode_overlaps_less_than_noise(model, dataset, jobs):
    images = dataset.images("val", ORACLE_IMAGES)
    cfg = AttackConfig(loss_mode="atn")
    layer = resolve_layer(cfg.target_layer, model.config.num_layers)
    results = attack_many(images, model, cfg, jobs)
    noise = _noise_outputs(model, images, cfg)
    wins = 0
    for image, r, n in zip(images, results, noise):
        a_gt = model.forward(image).attention.values(layer)
        wins += r.attention_overlap < attention_loss(a_gt, n.attention[layer]).item()
    assert wins >= 95


@pytest.mark.parametrize("mode", ["atn", "comb"])
def test_attention_overlap_tends_down(model, dataset, jobs, mode):
    images = dataset.images("val", ORACLE_IMAGES)
    results = attack_many(images, model, AttackConfig(loss_mode=mode), jobs)
    held = sum(r.attention_overlap <= r.trace[0].l_atn for r in results)
    assert held >= 95


def test_budget_holds_over_full_runs(rough_model):
    rng = np.random.default_rng(2024)
    images = rng.uniform(size=(20,) + rough_model.config.image_shape)
    for mode in LOSS_MODES:
        cfg = AttackConfig(loss_mode=mode, iterations=250)
        for image in images:
            violations = []

            def check(iteration, z, image=image):
                if np.abs(z).max() > EPS + 1e-12:
                    violations.append((iteration, "linf"))
                x = image + z
                if x.min() < 0.0 or x.max() > 1.0:
                    violations.append((iteration, "range"))

            attack(image, rough_model, cfg, on_iterate=check)
            assert violations == [], (mode, violations[:3])
