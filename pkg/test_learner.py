"""Tests for learner forward passes, losses and pseudo-labels."""

import numpy as np
import pytest

from conftest import SMOOTH_OPS, numeric_grad
from src.autodiff import ParamVector, Tape, constant, grad
from src.datasets import LabeledDataset
from src.exceptions import DatasetError, ShapeError
from src.learner import (
    NetworkSpec,
    evaluate,
    generate_pseudo_dataset,
    hard_ce_loss,
    init_learner,
    init_weights,
    predict_proba,
    soft_ce_loss,
)
from src.models import CandidateOpKind, CellSpec
from src.search_space import init_arch


def _net(classes=4, input_dim=2, width=3):
    return NetworkSpec(CellSpec(num_nodes=3, width=width, ops=SMOOTH_OPS), input_dim, classes)


def _random(net, seed):
    rng = np.random.default_rng(seed)
    weights = init_weights(net, rng)
    arch = init_arch(net.cell).with_values(rng.normal(size=init_arch(net.cell).size))
    return weights, arch


def test_zero_head_gives_uniform_predictions():
    net = _net(classes=4)
    weights, arch = _random(net, 0)
    weights.slot("head.weight")[...] = 0.0
    probs = predict_proba(np.random.default_rng(1).normal(size=(5, 2)), weights.constants(), arch.constants(), net)
    np.testing.assert_allclose(probs.values, np.full((5, 4), 0.25))


def test_forward_matches_straight_line_evaluation():
    cell = CellSpec(num_nodes=2, width=2, ops=[CandidateOpKind.AFFINE])
    net = NetworkSpec(cell, input_dim=2, num_classes=2)
    assert not net.has_stem
    weights = ParamVector(net.weight_layout())
    weights.slot("cell0.edge0.affine.weight")[...] = [[1.0, -1.0], [0.5, 2.0]]
    weights.slot("cell0.edge0.affine.bias")[...] = [0.1, -0.2]
    weights.slot("head.weight")[...] = [[2.0, 0.0], [-1.0, 1.0]]
    weights.slot("head.bias")[...] = [0.0, 0.3]
    x = np.array([[0.4, -0.6]])

    hidden = x @ np.array([[1.0, -1.0], [0.5, 2.0]]) + [0.1, -0.2]
    logits = hidden @ np.array([[2.0, 0.0], [-1.0, 1.0]]) + [0.0, 0.3]
    expected = np.exp(logits) / np.exp(logits).sum()
    probs = predict_proba(x, weights.constants(), init_arch(cell).constants(), net)
    np.testing.assert_allclose(probs.values, expected, rtol=1e-14)


def test_input_width_mismatch_is_a_shape_error():
    net = _net(input_dim=2)
    weights, arch = _random(net, 0)
    with pytest.raises(ShapeError):
        predict_proba(np.ones((3, 5)), weights.constants(), arch.constants(), net)


def test_hard_ce_on_uniform_prediction_is_log_classes():
    net = _net(classes=4)
    weights, arch = _random(net, 0)
    weights.slot("head.weight")[...] = 0.0
    batch = LabeledDataset(np.zeros((3, 2)), np.array([0, 3, 1]), 4)
    assert float(hard_ce_loss(weights.constants(), arch.constants(), net, batch).values) == pytest.approx(np.log(4))


def test_hard_ce_rejects_out_of_range_labels():
    net = _net(classes=2)
    weights, arch = _random(net, 0)
    batch = LabeledDataset(np.zeros((2, 2)), np.array([0, 2]), 3)
    with pytest.raises(DatasetError):
        hard_ce_loss(weights.constants(), arch.constants(), net, batch)


def test_hard_ce_equals_soft_ce_with_one_hot_targets():
    net = _net(classes=3)
    weights, arch = _random(net, 2)
    x = np.random.default_rng(3).normal(size=(6, 2))
    labels = np.array([0, 1, 2, 2, 1, 0])
    hard = hard_ce_loss(weights.constants(), arch.constants(), net, LabeledDataset(x, labels, 3))
    soft = soft_ce_loss(weights.constants(), arch.constants(), net, x, constant(np.eye(3)[labels]))
    assert abs(float(hard.values) - float(soft.values)) <= 1e-12


def test_soft_ce_of_own_prediction_is_entropy():
    net = _net(classes=3)
    weights, arch = _random(net, 4)
    x = np.random.default_rng(5).normal(size=(4, 2))
    probs = predict_proba(x, weights.constants(), arch.constants(), net)
    loss = soft_ce_loss(weights.constants(), arch.constants(), net, x, probs)
    entropy = -(probs.values * np.log(probs.values)).sum(axis=1).mean()
    assert abs(float(loss.values) - entropy) <= 1e-10


def test_soft_ce_rejects_unnormalized_targets():
    net = _net(classes=2)
    weights, arch = _random(net, 0)
    with pytest.raises(DatasetError):
        soft_ce_loss(weights.constants(), arch.constants(), net, np.zeros((2, 2)),
                     constant(np.array([[0.5, 0.5], [0.9, 0.3]])))


def test_soft_ce_gradient_flows_into_the_label_producer():
    net = _net(classes=3)
    consumer, arch = _random(net, 6)
    producer, _ = _random(net, 7)
    x = np.random.default_rng(8).normal(size=(5, 2))

    def loss_at(flat):
        labels = predict_proba(x, producer.with_values(flat).constants(), arch.constants(), net)
        return float(soft_ce_loss(consumer.constants(), arch.constants(), net, x, labels).values)

    with Tape() as tape:
        bound = producer.bind(tape)
        labels = predict_proba(x, bound, arch.constants(), net)
        analytic = grad(soft_ce_loss(consumer.constants(), arch.constants(), net, x, labels), bound)
    numeric = numeric_grad(loss_at, producer.values)
    error = np.linalg.norm(analytic.values - numeric) / np.linalg.norm(numeric)
    assert error <= 1e-6


def test_pseudo_labels_equal_predictions_bitwise():
    net = _net(classes=3)
    weights, arch = _random(net, 9)
    x = np.random.default_rng(10).normal(size=(7, 2))
    pseudo = generate_pseudo_dataset(x, weights.constants(), arch.constants(), net, producer=1)
    assert len(pseudo) == 7 and pseudo.producer == 1
    np.testing.assert_array_equal(pseudo.inputs, x)
    np.testing.assert_array_equal(
        pseudo.soft_labels.values, predict_proba(x, weights.constants(), arch.constants(), net).values
    )


def test_pseudo_label_rows_are_distributions_across_random_cases():
    net = _net(classes=4)
    rows = 0
    for seed in range(100):
        weights, arch = _random(net, seed)
        weights.values *= 1.0 + seed / 10.0
        x = np.random.default_rng(1000 + seed).normal(scale=5.0, size=(100, 2))
        labels = generate_pseudo_dataset(x, weights.constants(), arch.constants(), net, producer=0).soft_labels.values
        assert labels.min() >= 0.0
        np.testing.assert_allclose(labels.sum(axis=1), 1.0, atol=1e-6)
        rows += len(labels)
    assert rows == 10_000


def test_hardened_pseudo_labels_are_one_hot_and_detached():
    net = _net(classes=3)
    weights, arch = _random(net, 11)
    x = np.random.default_rng(12).normal(size=(5, 2))
    with Tape() as tape:
        pseudo = generate_pseudo_dataset(x, weights.bind(tape), arch.constants(), net, producer=0, harden=True)
    assert pseudo.soft_labels.tape is None
    np.testing.assert_array_equal(pseudo.soft_labels.values.sum(axis=1), np.ones(5))
    assert set(np.unique(pseudo.soft_labels.values)) <= {0.0, 1.0}


def test_empty_unlabeled_batch_is_rejected():
    net = _net()
    weights, arch = _random(net, 0)
    with pytest.raises(DatasetError):
        generate_pseudo_dataset(np.zeros((0, 2)), weights.constants(), arch.constants(), net, producer=0)


def test_empty_labeled_batch_is_rejected_instead_of_nan():
    net = _net(classes=2)
    weights, arch = _random(net, 0)
    empty = LabeledDataset(np.zeros((0, 2)), np.zeros(0, dtype=int), 2)
    with pytest.raises(DatasetError, match="empty batch"):
        hard_ce_loss(weights.constants(), arch.constants(), net, empty)
    with pytest.raises(DatasetError, match="empty batch"):
        evaluate(weights, arch, net, empty)


def test_non_finite_producer_weights_are_refused_as_pseudo_labels():
    net = _net()
    weights, arch = _random(net, 3)
    weights.slot("head.bias")[0] = np.nan
    x = np.random.default_rng(4).normal(size=(6, 2))
    with pytest.raises(DatasetError, match="learner 1"):
        generate_pseudo_dataset(x, weights.constants(), arch.constants(), net, producer=1)


def test_init_learner_is_seeded_and_v_w_share_layout():
    net = _net()
    first, second = init_learner(0, net, 42), init_learner(0, net, 42)
    np.testing.assert_array_equal(first.v.values, second.v.values)
    np.testing.assert_array_equal(first.w.values, second.w.values)
    assert first.v.same_layout(first.w)
    assert not np.array_equal(first.v.values, first.w.values)
    assert np.all(first.arch.values == 0.0)
    for name in first.v.names:
        if name.endswith(".bias"):
            assert np.all(first.v.slot(name) == 0.0)


def test_evaluate_reports_loss_and_accuracy():
    net = _net(classes=2)
    weights, arch = _random(net, 0)
    weights.slot("head.weight")[...] = 0.0
    weights.slot("head.bias")[...] = [1.0, 0.0]
    data = LabeledDataset(np.zeros((4, 2)), np.array([0, 0, 0, 1]), 2)
    loss, acc = evaluate(weights, arch, net, data)
    assert acc == 0.75
    assert loss == pytest.approx(-(3 * np.log(1 / (1 + np.exp(-1))) + np.log(1 / (1 + np.exp(1)))) / 4)
