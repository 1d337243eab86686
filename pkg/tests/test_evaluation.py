"""Tests for the attack-success metrics and task protocols"""

import json

import numpy as np
import pytest

from atnbreak.attack import AttackConfig
from atnbreak.evaluation import (
    MetricReport,
    attack_success_rate,
    attack_success_rate_classification,
    confusion_matrix,
    cosine_similarity,
    dense_degradation,
    epsilon_sweep,
    frame_to_records,
    layer_ablation,
    mean_iou,
    mode_comparison_report,
    perturb,
    reports_table,
    retrieval_success_at_k,
    success_at_k,
    token_accuracy,
    transfer_matrix,
    write_report,
)
from atnbreak.utils import EvaluationError
from atnbreak.vit import ViTConfig, ViTModel

QUICK = AttackConfig(iterations=2)


class TestAttackSuccessRate:
    def test_ratio(self):
        labels = np.zeros(100, dtype=int)
        adv = np.ones(100, dtype=int)
        adv[:3] = 0
        rate, n = attack_success_rate(labels, adv, labels)
        assert rate == 0.97
        assert n == 100

    def test_only_clean_correct_count(self):
        rate, n = attack_success_rate([0, 1, 1, 0], [1, 1, 0, 0], [0, 0, 1, 1])
        # eligible: indices 0 and 2, both flipped
        assert (rate, n) == (1.0, 2)

    def test_empty_denominator(self):
        with pytest.raises(EvaluationError):
            attack_success_rate([1, 1], [0, 0], [0, 0])


class TestRetrievalMetric:
    def test_forced_ranking(self):
        clean = np.array([[1.0, 0.0], [0.0, 1.0]])
        attacked = np.array([[-1.0, 0.0], [0.0, 1.0]])
        assert success_at_k(clean[:1], attacked, [0], k=1) == 1.0
        assert success_at_k(clean[1:], attacked, [1], k=1) == 0.0

    def test_identity_gallery(self, rng):
        emb = rng.normal(size=(10, 6))
        assert success_at_k(emb, emb, np.arange(10), k=1) == 0.0

    def test_ties_do_not_count_against_true_item(self):
        gallery = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert success_at_k(gallery, gallery, [0, 1], k=1) == 0.0

    def test_k_larger_than_gallery(self):
        with pytest.raises(EvaluationError):
            success_at_k(np.eye(3), np.eye(3), [0, 1, 2], k=4)

    def test_k_below_one(self):
        with pytest.raises(EvaluationError):
            success_at_k(np.eye(3), np.eye(3), [0, 1, 2], k=0)

    def test_cosine_zero_vector(self):
        sims = cosine_similarity(np.zeros((1, 3)), np.eye(3))
        np.testing.assert_array_equal(sims, np.zeros((1, 3)))


class TestDenseMetrics:
    def test_all_one_class_on_balanced_masks(self):
        true = np.repeat(np.arange(4), 25)
        pred = np.zeros_like(true)
        cm = confusion_matrix(pred, true, 4)
        # the predicted class has IoU 1/K; the others are empty
        assert cm[0, 0] / (cm[:, 0].sum() + cm[0].sum() - cm[0, 0]) == 0.25
        assert mean_iou(pred, true, 4) == pytest.approx(1.0 / 16.0)

    def test_perfect_prediction(self):
        true = np.array([0, 1, 2, 2, 1])
        assert mean_iou(true, true, 3) == 1.0
        assert token_accuracy(true, true) == 1.0

    def test_absent_classes_are_skipped(self):
        assert mean_iou([0, 0, 1], [0, 0, 1], 5) == 1.0


class TestMetricReport:
    def test_value_outside_unit_range(self):
        with pytest.raises(EvaluationError):
            MetricReport("x", 1.5, 1, "fp")

    def test_non_finite_value(self):
        with pytest.raises(EvaluationError):
            MetricReport("x", float("nan"), 1, "fp")


class TestProtocols:
    def test_zero_budget_classification(self, rough_model, tiny_dataset):
        report = attack_success_rate_classification(
            rough_model, tiny_dataset, AttackConfig(epsilon=0.0, iterations=2), count=8
        )
        assert report.value == 0.0
        assert report.metric == "classification.asr"
        assert 1 <= report.n <= 8
        assert len(report.config_fingerprint) == 16

    def test_zero_budget_retrieval(self, rough_model, tiny_dataset):
        gallery = tiny_dataset.images("val", 8)
        reports = retrieval_success_at_k(rough_model, gallery, AttackConfig(epsilon=0.0, iterations=2), ks=(1, 5))
        assert [r.metric for r in reports] == ["retrieval.success@1", "retrieval.success@5"]
        assert all(r.value == 0.0 for r in reports)

    def test_retrieval_k_exceeds_gallery(self, rough_model, tiny_dataset):
        with pytest.raises(EvaluationError):
            retrieval_success_at_k(rough_model, tiny_dataset.images("val", 4), QUICK, ks=10)

    def test_zero_budget_dense(self, rough_model, tiny_dataset):
        clean, attacked = dense_degradation(
            rough_model, tiny_dataset, AttackConfig(epsilon=0.0, iterations=2), count=6
        )
        assert attacked.value == clean.value
        assert attacked.details["miou"] == clean.details["miou"]
        assert attacked.details["accuracy_drop"] == 0.0
        assert clean.n == 6 * 9

    def test_mode_comparison_grid(self, rough_model, tiny_dataset):
        grid, details = mode_comparison_report(rough_model, tiny_dataset, QUICK, count=16)
        assert grid.shape == (3, 3)
        assert list(grid.index) == ["classification", "retrieval", "dense"]
        assert list(grid.columns) == ["atn", "emb", "comb"]
        assert np.all(np.isfinite(grid.to_numpy(dtype=float)))
        assert 0 <= details["comb_at_least_min_tasks"] <= 3

    def test_transfer_matrix_dimensions(self, rough_model, tiny_model, tiny_dataset):
        matrix, control = transfer_matrix(
            [rough_model, tiny_model], [rough_model], tiny_dataset, QUICK, count=16,
            source_names=["a", "b"], target_names=["a"],
        )
        assert matrix.shape == (2, 1)
        assert list(matrix.index) == ["a", "b"]
        for frame in (matrix, control):
            values = frame.to_numpy(dtype=float)
            assert np.all((values >= 0) & (values <= 1))
        assert control.shape == matrix.shape
        assert list(control.columns) == ["a"]

    def test_transfer_control_matches_classification_control(self, rough_model, tiny_dataset):
        _, control = transfer_matrix([rough_model], [rough_model], tiny_dataset, QUICK, count=16)
        images = tiny_dataset.images("val", 16)
        labels = tiny_dataset.labels("val", 16)
        perturbed = perturb(rough_model, images, QUICK)
        expected, _ = attack_success_rate(
            rough_model.predict(images), rough_model.predict(perturbed.control), labels
        )
        assert control.iloc[0, 0] == expected

    def test_transfer_rejects_mismatched_models(self, rough_model, tiny_dataset):
        other = ViTModel.initialise(ViTConfig(image_size=16, patch_size=4, embed_dim=8, num_heads=2, num_layers=1), 0)
        with pytest.raises(EvaluationError):
            transfer_matrix([rough_model], [other], tiny_dataset, QUICK, count=4)

    def test_model_without_heads(self, tiny_dataset):
        cfg = ViTConfig(image_size=12, patch_size=4, embed_dim=8, num_heads=2, num_layers=1, num_classes=None)
        with pytest.raises(EvaluationError):
            attack_success_rate_classification(ViTModel.initialise(cfg, 0), tiny_dataset, QUICK, count=4)

    def test_epsilon_sweep_rows(self, rough_model, tiny_dataset):
        frame = epsilon_sweep(rough_model, tiny_dataset, QUICK, epsilons=("0", "4/255"), count=4)
        assert list(frame["epsilon"]) == ["0", "4/255"]
        assert frame.loc[0, "asr"] == 0.0

    def test_layer_ablation_rows(self, rough_model, tiny_dataset):
        frame = layer_ablation(rough_model, tiny_dataset, QUICK, count=16)
        assert list(frame["layer"]) == [1, 2]
        assert list(frame.columns) == ["layer", "asr", "dense_drop"]


def test_write_report(tmp_path):
    reports = [MetricReport("retrieval.success@1", 0.5, 4, "abc")]
    table = reports_table(reports)
    json_path, text_path = write_report(
        tmp_path / "report.json", {"reports": [r.to_dict() for r in reports], "table": frame_to_records(table)}, table
    )
    payload = json.loads(json_path.read_text())
    assert payload["reports"][0]["value"] == 0.5
    assert payload["table"]["columns"] == ["metric", "value", "n", "config_fingerprint"]
    assert "retrieval.success@1" in text_path.read_text()

