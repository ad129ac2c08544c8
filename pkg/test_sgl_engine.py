"""Tests for the three-stage group step."""

import copy
import dataclasses

import numpy as np
import pytest

from conftest import SMOOTH_OPS
from src.autodiff import Tape, grad_many, value_and_grad
from src.datasets import LabeledDataset, build_task_data
from src.exceptions import NonFiniteGradientError
from src.hypergradient import hvp_fd
from src.learner import NetworkSpec, generate_pseudo_dataset, hard_ce_loss, soft_ce_loss
from src.models import ArchOptimizerKind, CellSpec, DatasetSpec, EngineConfig
from src.sgl_engine import (
    StepBatches,
    advance,
    draw_batches,
    evaluate_group,
    init_group,
    sgl_step,
    stage1_update,
    stage2_objective,
    stage2_update,
)


def _run(engine, net, data, run_seed, steps, workers=1):
    group = init_group(engine, net, run_seed, data)
    records = []
    for _ in range(steps):
        group, record = sgl_step(group, engine, draw_batches(group, data), workers=workers)
        records.append(record)
    return group, records


def _assert_learners_equal(left, right, exact=True):
    for name in ("arch", "v", "w"):
        a, b = getattr(left, name).values, getattr(right, name).values
        if exact:
            np.testing.assert_array_equal(a, b)
        else:
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


def test_stage1_is_one_descent_step_and_leaves_v_alone(tiny_group, tiny_batches):
    learner = tiny_group.learners[0]
    before = learner.v.values.copy()
    v_prime, loss = stage1_update(learner, tiny_batches.train, 0.25)
    value, gradient = value_and_grad(lambda a, v: hard_ce_loss(v, a, learner.net, tiny_batches.train),
                                     learner.arch, learner.v)
    np.testing.assert_array_equal(v_prime.values, before - 0.25 * gradient.values)
    np.testing.assert_array_equal(learner.v.values, before)
    assert loss == value


def test_stage2_objective_reduces_to_hard_ce(tiny_group, tiny_batches):
    learner, peer = tiny_group.learners
    pseudo = [generate_pseudo_dataset(tiny_batches.unlabeled.inputs, peer.v.constants(), peer.arch.constants(),
                                      peer.net, producer=1)]
    hard = hard_ce_loss(learner.w.constants(), learner.arch.constants(), learner.net, tiny_batches.train)
    no_tradeoff = stage2_objective(learner.w.constants(), learner.arch.constants(), learner.net,
                                   tiny_batches.train, pseudo, 0.0)
    no_peers = stage2_objective(learner.w.constants(), learner.arch.constants(), learner.net,
                                tiny_batches.train, [], 0.7)
    assert float(no_tradeoff.values) == float(hard.values)
    assert float(no_peers.values) == float(hard.values)


def test_stage2_objective_sums_peer_soft_losses(tiny_net, tiny_data):
    engine = EngineConfig(num_learners=3, batch_size=8)
    group = init_group(engine, tiny_net, 2, tiny_data)
    batches = draw_batches(group, tiny_data)
    learners = group.learners
    pseudo = [generate_pseudo_dataset(batches.unlabeled.inputs, l.v.constants(), l.arch.constants(), l.net, l.index)
              for l in learners[1:]]
    w, a = learners[0].w.constants(), learners[0].arch.constants()
    expected = float(hard_ce_loss(w, a, tiny_net, batches.train).values) + 0.1 * sum(
        float(soft_ce_loss(w, a, tiny_net, p.inputs, p.soft_labels).values) for p in pseudo
    )
    value = stage2_objective(w, a, tiny_net, batches.train, pseudo, 0.1)
    assert float(value.values) == pytest.approx(expected, rel=1e-14)


def test_stage2_without_tradeoff_is_a_plain_ce_step(tiny_group, tiny_batches):
    learner, peer = tiny_group.learners
    pseudo = [generate_pseudo_dataset(tiny_batches.unlabeled.inputs, peer.v.constants(), peer.arch.constants(),
                                      peer.net, producer=1)]
    w_prime, _ = stage2_update(learner, tiny_batches.train, pseudo, 0.0, 0.3)
    plain, _ = stage1_update(
        type(learner)(learner.index, learner.net, learner.arch, learner.w, learner.w, learner.seed, learner.rng),
        tiny_batches.train, 0.3,
    )
    np.testing.assert_array_equal(w_prime.values, plain.values)


def test_step_leaves_the_input_group_untouched(tiny_group, tiny_batches, tiny_engine):
    snapshot = tiny_group.copy()
    new_group, record = sgl_step(tiny_group, tiny_engine, tiny_batches)
    for before, after in zip(snapshot.learners, tiny_group.learners):
        _assert_learners_equal(before, after)
    assert new_group.step == tiny_group.step + 1 == record.step
    assert not np.array_equal(new_group.learners[0].arch.values, tiny_group.learners[0].arch.values)
    assert set(record.cross_grad_norms) == {"0<-1", "1<-0"}


def test_failed_step_raises_and_keeps_the_pre_step_state(tiny_group, tiny_batches, tiny_engine):
    snapshot = tiny_group.copy()
    poisoned = tiny_batches.train.inputs.copy()
    poisoned[0, 0] = np.nan
    batches = StepBatches(
        train=LabeledDataset(poisoned, tiny_batches.train.labels, tiny_batches.train.num_classes),
        val=tiny_batches.val,
        unlabeled=tiny_batches.unlabeled,
    )
    with pytest.raises(NonFiniteGradientError) as info:
        sgl_step(tiny_group, tiny_engine, batches)
    assert info.value.diagnostics["learner"] == 0
    for before, after in zip(snapshot.learners, tiny_group.learners):
        _assert_learners_equal(before, after)
    assert tiny_group.step == snapshot.step


def _next_indices(samplers):
    return {name: sampler.next_indices() for name, sampler in sorted(samplers.items())}


def test_advance_matches_drawing_then_stepping(tiny_engine, tiny_net, tiny_data):
    drawn = init_group(tiny_engine, tiny_net, 1, tiny_data)
    stepped, expected = sgl_step(drawn, tiny_engine, draw_batches(drawn, tiny_data))
    fresh = init_group(tiny_engine, tiny_net, 1, tiny_data)
    untouched = copy.deepcopy(fresh.samplers)
    advanced, record, _ = advance(fresh, tiny_engine, tiny_data)
    assert record == expected
    for before, after in zip(stepped.learners, advanced.learners):
        _assert_learners_equal(before, after)
    for name, indices in _next_indices(untouched).items():
        np.testing.assert_array_equal(fresh.samplers[name].next_indices(), indices)


def test_failed_advance_leaves_the_samplers_where_they_were(tiny_group, tiny_engine, tiny_data):
    inputs = tiny_data.train.inputs.copy()
    inputs[:, 0] = np.nan
    poisoned = dataclasses.replace(tiny_data, train=LabeledDataset(inputs, tiny_data.train.labels,
                                                                   tiny_data.train.num_classes))
    reference = copy.deepcopy(tiny_group.samplers)
    with pytest.raises(NonFiniteGradientError):
        advance(tiny_group, tiny_engine, poisoned)
    assert tiny_group.step == 0
    expected = _next_indices(reference)
    for name, indices in _next_indices(tiny_group.samplers).items():
        np.testing.assert_array_equal(indices, expected[name])


def test_commit_switch_keeps_inner_weights_virtual(tiny_group, tiny_batches, tiny_engine):
    engine = tiny_engine.model_copy(update={"commit_inner_updates": False})
    new_group, _ = sgl_step(tiny_group, engine, tiny_batches)
    for before, after in zip(tiny_group.learners, new_group.learners):
        np.testing.assert_array_equal(before.v.values, after.v.values)
        np.testing.assert_array_equal(before.w.values, after.w.values)
        assert not np.array_equal(before.arch.values, after.arch.values)


def test_single_learner_step_matches_one_step_unrolled_search(tiny_net, tiny_data):
    engine = EngineConfig(num_learners=1, tradeoff=0.1, xi_v=0.2, xi_w=0.2, eta_a=0.5,
                          arch_optimizer=ArchOptimizerKind.PLAIN, batch_size=8)
    group = init_group(engine, tiny_net, 3, tiny_data)
    batches = draw_batches(group, tiny_data)
    learner = group.learners[0]
    new_group, _ = sgl_step(group, engine, batches)

    def train_loss(at, wrt):
        return hard_ce_loss(at, wrt, tiny_net, batches.train)

    _, w_grad = value_and_grad(lambda a, w: hard_ce_loss(w, a, tiny_net, batches.train), learner.arch, learner.w)
    w_prime = learner.w.shifted(w_grad, -0.2)
    with Tape() as tape:
        w_bound, a_bound = w_prime.bind(tape), learner.arch.bind(tape)
        direction, direct = grad_many(hard_ce_loss(w_bound, a_bound, tiny_net, batches.val[0]), w_bound, a_bound)
    correction = hvp_fd(train_loss, learner.w, learner.arch, direction, 0.01)
    expected_arch = learner.arch.values - 0.5 * (direct.values - 0.2 * correction.values)

    np.testing.assert_allclose(new_group.learners[0].w.values, w_prime.values, rtol=0, atol=1e-12)
    np.testing.assert_allclose(new_group.learners[0].arch.values, expected_arch, rtol=0, atol=1e-10)


def test_single_learner_trajectory_ignores_tradeoff(tiny_net, tiny_data, tiny_engine):
    coupled = tiny_engine.model_copy(update={"num_learners": 1, "tradeoff": 0.5})
    decoupled = tiny_engine.model_copy(update={"num_learners": 1, "tradeoff": 0.0})
    first, _ = _run(coupled, tiny_net, tiny_data, 4, 50)
    second, _ = _run(decoupled, tiny_net, tiny_data, 4, 50)
    _assert_learners_equal(first.learners[0], second.learners[0])


def test_two_learners_without_tradeoff_match_independent_runs(tiny_net, tiny_data, tiny_engine):
    pair = tiny_engine.model_copy(update={"tradeoff": 0.0, "learner_seeds": [11, 12]})
    group, records = _run(pair, tiny_net, tiny_data, 5, 50)
    for k, seed in enumerate([11, 12]):
        solo = tiny_engine.model_copy(update={"num_learners": 1, "tradeoff": 0.0, "learner_seeds": [seed]})
        alone, _ = _run(solo, tiny_net, tiny_data, 5, 50)
        _assert_learners_equal(group.learners[k], alone.learners[0], exact=False)
    assert all(norm == 0.0 for record in records for norm in record.cross_grad_norms.values())


def test_identical_learners_stay_bitwise_identical(tiny_net, tiny_data, tiny_engine):
    twins = tiny_engine.model_copy(update={"learner_seeds": [7, 7], "arch_optimizer": ArchOptimizerKind.ADAM})
    group, _ = _run(twins, tiny_net, tiny_data, 6, 100)
    _assert_learners_equal(group.learners[0], group.learners[1])


def test_swapping_learner_seeds_swaps_trajectories(tiny_net, tiny_data, tiny_engine):
    forward = tiny_engine.model_copy(update={"learner_seeds": [21, 22]})
    backward = tiny_engine.model_copy(update={"learner_seeds": [22, 21]})
    first, _ = _run(forward, tiny_net, tiny_data, 8, 10)
    second, _ = _run(backward, tiny_net, tiny_data, 8, 10)
    _assert_learners_equal(first.learners[0], second.learners[1])
    _assert_learners_equal(first.learners[1], second.learners[0])


def test_worker_pool_does_not_change_results(tiny_net, tiny_data, tiny_engine):
    serial, serial_records = _run(tiny_engine, tiny_net, tiny_data, 9, 5, workers=1)
    pooled, pooled_records = _run(tiny_engine, tiny_net, tiny_data, 9, 5, workers=3)
    for left, right in zip(serial.learners, pooled.learners):
        _assert_learners_equal(left, right)
    assert [r.model_dump() for r in serial_records] == [r.model_dump() for r in pooled_records]


def test_separate_validation_batches_per_learner(tiny_group, tiny_net, tiny_data, tiny_engine):
    engine = tiny_engine.model_copy(update={"shared_val_batch": False})
    group = init_group(engine, tiny_net, 1, tiny_data)
    batches = draw_batches(group, tiny_data)
    assert {"val0", "val1"} <= set(group.samplers)
    assert not np.array_equal(batches.val[0].inputs, batches.val[1].inputs)
    shared = draw_batches(tiny_group, tiny_data)
    assert shared.val[0] is shared.val[1]


def test_fifty_steps_lower_validation_loss():
    data = build_task_data(DatasetSpec(num_classes=2, dim=2, per_class=100, separation=3.0, seed=1))
    net = NetworkSpec(CellSpec(num_nodes=3, width=4, ops=SMOOTH_OPS), data.input_dim, data.num_classes)
    engine = EngineConfig(num_learners=2, batch_size=64)
    group = init_group(engine, net, 1, data)
    start = evaluate_group(group, data.val)
    for _ in range(50):
        group, _ = sgl_step(group, engine, draw_batches(group, data))
    end = evaluate_group(group, data.val)
    for before, after in zip(start, end):
        assert after.val_loss < before.val_loss
