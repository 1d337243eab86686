"""Tests for the attack losses, the AdamW/projection step and the attack loop"""

from dataclasses import replace

import numpy as np
import pytest

import atnbreak
import atnbreak.attack as attack_module
from atnbreak import tensor as T
from atnbreak.attack import (
    AttackConfig,
    PerturbationState,
    adamw_step,
    attack,
    attack_many,
    attention_loss,
    balance_beta,
    combined_loss,
    embedding_loss,
    project,
    sign_noise_baseline,
)
from atnbreak.utils import AttackDivergedError, ConfigError, ShapeError

EPS = 8 / 255


def _random_attention(rng, heads, tokens):
    logits = rng.normal(size=(heads, tokens, tokens))
    e = np.exp(logits - logits.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _loop_attention_loss(a_gt, a_adv):
    heads, n, _ = a_gt.shape
    total = 0.0
    for h in range(heads):
        acc = 0.0
        for r in range(1, n):
            for c in range(1, n):
                acc += a_gt[h, r, c] * a_adv[h, r, c]
        total += acc / (n - 1) ** 2
    return total


class TestAttentionLoss:
    def test_uniform_attention(self):
        a = np.full((2, 3, 3), 1.0 / 3.0)
        assert attention_loss(a, a).item() == pytest.approx(2.0 / 9.0, rel=1e-15)

    def test_disjoint_supports(self):
        a_gt = np.zeros((1, 3, 3))
        a_adv = np.zeros((1, 3, 3))
        a_gt[:, :, 1] = 1.0
        a_adv[:, :, 2] = 1.0
        assert attention_loss(a_gt, a_adv).item() == 0.0

    def test_matches_loop_oracle(self, rng):
        for _ in range(50):
            a_gt = _random_attention(rng, 4, 17)
            a_adv = _random_attention(rng, 4, 17)
            got = attention_loss(a_gt, a_adv).item()
            assert abs(got - _loop_attention_loss(a_gt, a_adv)) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            attention_loss(np.zeros((2, 3, 3)), np.zeros((2, 4, 4)))

    def test_no_gradient_into_clean_attention(self, rng):
        record = T.ComputationRecord()
        a_gt = record.watch(_random_attention(rng, 2, 4), "gt")
        a_adv = record.watch(_random_attention(rng, 2, 4), "adv")
        grads = record.backward(attention_loss(a_gt, a_adv))
        assert np.all(grads[a_gt] == 0.0)
        assert np.all(grads[a_adv][:, 0, :] == 0.0)
        assert np.all(grads[a_adv][:, :, 0] == 0.0)


class TestEmbeddingLoss:
    def test_identical(self):
        e = np.array([0.3, -1.2, 2.0])
        assert embedding_loss(e, e).item() == 0.0

    def test_unit_axes(self):
        assert embedding_loss(np.array([1.0, 0.0]), np.array([0.0, 1.0])).item() == pytest.approx(np.sqrt(2.0))

    def test_matches_direct_sum(self, rng):
        for _ in range(20):
            a, b = rng.normal(size=64), rng.normal(size=64)
            expected = np.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
            assert abs(embedding_loss(a, b).item() - expected) < 1e-12

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            embedding_loss(np.zeros(3), np.zeros(4))


class TestBalance:
    def test_ratio_of_magnitudes(self):
        assert balance_beta(0.5, 2.0) == 0.25

    def test_zero_attention_loss(self):
        assert balance_beta(0.0, 3.7) == 0.0

    def test_guard_path(self):
        assert balance_beta(1.0, 1e-15) == 0.0

    def test_combined_value(self):
        loss, beta = combined_loss(T.constant(0.5), T.constant(2.0), alpha=1.0)
        assert beta == 0.25
        assert loss.item() == pytest.approx(0.5 - 0.25 * 2.0)


class TestStep:
    def test_first_adam_step(self):
        state = PerturbationState.start(np.zeros(3))
        state = adamw_step(state, np.ones(3), AttackConfig())
        np.testing.assert_allclose(state.z, -0.01 / (1.0 + 1e-8), rtol=1e-12)
        assert state.t == 1

    def test_zero_gradient_is_fixed_point(self):
        z = np.array([0.01, -0.02, 0.0])
        state = adamw_step(PerturbationState.start(z), np.zeros(3), AttackConfig())
        np.testing.assert_array_equal(state.z, z)

    def test_gradient_shape_mismatch(self):
        with pytest.raises(ShapeError):
            adamw_step(PerturbationState.start(np.zeros(3)), np.zeros(4), AttackConfig())

    def test_project_clamps_to_budget(self):
        z = project(np.array([0.05, -0.02]), EPS, np.array([0.5, 0.5]))
        np.testing.assert_allclose(z, [EPS, -0.02])

    def test_project_keeps_pixels_in_range(self):
        z = project(np.array([EPS, -EPS]), EPS, np.array([1.0, 0.01]))
        np.testing.assert_allclose(z, [0.0, -0.01])

    def test_project_idempotent(self, rng):
        image = rng.uniform(size=(1, 6, 6))
        z = project(rng.normal(scale=0.1, size=image.shape), EPS, image)
        np.testing.assert_array_equal(project(z, EPS, image), z)

    def test_sign_noise_baseline(self, rng):
        image = rng.uniform(0.1, 0.9, size=(1, 6, 6))
        z = sign_noise_baseline(image, EPS, seed=5)
        np.testing.assert_allclose(np.abs(z), EPS)
        np.testing.assert_array_equal(z, sign_noise_baseline(image, EPS, seed=5))


class TestConfig:
    def test_fraction_epsilon(self):
        assert AttackConfig(epsilon="8/255").epsilon == pytest.approx(EPS)

    @pytest.mark.parametrize("epsilon", [-0.01, 1.5, "2"])
    def test_epsilon_outside_pixel_range(self, epsilon):
        with pytest.raises(ConfigError, match="attack.epsilon"):
            AttackConfig(epsilon=epsilon)

    def test_epsilon_limits_are_allowed(self):
        assert AttackConfig(epsilon=0).epsilon == 0.0
        assert AttackConfig(epsilon="1").epsilon == 1.0

    def test_package_exposes_attack_module(self):
        assert atnbreak.attack is attack_module
        assert callable(atnbreak.attack.attack)

    def test_invalid_mode(self):
        with pytest.raises(ConfigError):
            AttackConfig(loss_mode="both")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="attack.steps"):
            AttackConfig.from_dict({"steps": 3})

    def test_auto_init(self):
        assert AttackConfig(loss_mode="emb").resolved_init == "uniform"
        assert AttackConfig(loss_mode="comb").resolved_init == "zero"


class TestAttack:
    def test_zero_budget_is_identity(self, rough_model, tiny_image):
        for mode in ("atn", "emb", "comb"):
            result = attack(tiny_image, rough_model, AttackConfig(epsilon=0.0, iterations=3, loss_mode=mode))
            assert np.all(result.z_star == 0.0)
            np.testing.assert_array_equal(result.adversarial_embedding, result.clean_embedding)
            assert result.embedding_distance == 0.0

    def test_budget_holds_every_iteration(self, rough_model, tiny_image):
        seen = []

        def check(iteration, z):
            assert np.abs(z).max() <= EPS + 1e-12
            x = tiny_image + z
            assert x.min() >= 0.0 and x.max() <= 1.0
            seen.append(iteration)

        result = attack(tiny_image, rough_model, AttackConfig(iterations=8), on_iterate=check)
        assert seen == list(range(1, 9))
        assert len(result.trace) == 8
        assert np.abs(result.z_star).max() <= EPS + 1e-12

    def test_balance_holds_per_iteration(self, rough_model, tiny_image):
        result = attack(tiny_image, rough_model, AttackConfig(iterations=10, loss_mode="comb"))
        checked = 0
        for row in result.trace:
            assert np.isfinite(row.l_comb)
            if abs(row.l_emb) > 1e-12:
                assert abs(row.l_atn) == pytest.approx(abs(row.beta * row.l_emb), rel=1e-9)
                checked += 1
            else:
                assert row.beta == 0.0
        assert checked >= 8

    def test_zero_start_takes_guard_path(self, rough_model, tiny_image):
        result = attack(tiny_image, rough_model, AttackConfig(iterations=2, loss_mode="comb"))
        assert result.trace[0].l_emb == 0.0
        assert result.trace[0].beta == 0.0

    def test_attention_mode_reduces_overlap(self, rough_model, tiny_image):
        result = attack(tiny_image, rough_model, AttackConfig(iterations=30, loss_mode="atn"))
        assert result.attention_overlap < result.trace[0].l_atn

    def test_embedding_mode_moves_embedding(self, rough_model, tiny_image):
        result = attack(tiny_image, rough_model, AttackConfig(iterations=20, loss_mode="emb"))
        assert result.embedding_distance > 0.0
        assert result.trace[-1].l_emb > result.trace[0].l_emb

    def test_deterministic(self, rough_model, tiny_image):
        cfg = AttackConfig(iterations=5, loss_mode="emb", seed=11)
        a = attack(tiny_image, rough_model, cfg)
        b = attack(tiny_image, rough_model, cfg)
        np.testing.assert_array_equal(a.z_star, b.z_star)

    def test_trace_records(self, rough_model, tiny_image):
        result = attack(tiny_image, rough_model, AttackConfig(iterations=3))
        rows = list(result.trace_records())
        assert [r["iteration"] for r in rows] == [1, 2, 3]
        assert set(rows[0]) == {"iteration", "L_atn", "L_emb", "L_comb", "beta"}
        assert result.summary()["iterations"] == 3

    def test_non_finite_loss_aborts(self, rough_model, tiny_image, monkeypatch):
        monkeypatch.setattr(attack_module, "attention_loss", lambda gt, adv: T.constant(np.nan))
        with pytest.raises(AttackDivergedError, match="iteration 1"):
            attack(tiny_image, rough_model, AttackConfig(iterations=3, loss_mode="atn"))

    def test_wrong_image_shape(self, rough_model):
        with pytest.raises(ShapeError):
            attack(np.zeros((1, 8, 8)), rough_model, AttackConfig(iterations=1))


def test_attack_many_keeps_order_and_seeds(rough_model, rng):
    images = rng.uniform(0.1, 0.9, size=(3,) + rough_model.config.image_shape)
    cfg = AttackConfig(iterations=3, loss_mode="emb", seed=4)
    results = attack_many(images, rough_model, cfg, jobs=1)
    assert len(results) == 3
    for i, result in enumerate(results):
        alone = attack(images[i], rough_model, replace(cfg, seed=4 + i))
        np.testing.assert_array_equal(result.z_star, alone.z_star)


def test_attack_many_worker_count_does_not_change_results(rough_model, rng):
    images = rng.uniform(0.1, 0.9, size=(2,) + rough_model.config.image_shape)
    cfg = AttackConfig(iterations=2, loss_mode="comb")
    serial = attack_many(images, rough_model, cfg, jobs=1)
    parallel = attack_many(images, rough_model, cfg, jobs=2)
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.z_star, b.z_star)
