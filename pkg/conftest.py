"""Shared fixtures for the SGL test suite."""

import numpy as np
import pytest

from src.datasets import build_task_data
from src.learner import NetworkSpec
from src.models import ArchOptimizerKind, CandidateOpKind, CellSpec, DatasetSpec, EngineConfig
from src.sgl_engine import draw_batches, init_group

SMOOTH_OPS = [
    CandidateOpKind.ZERO,
    CandidateOpKind.IDENTITY,
    CandidateOpKind.AFFINE,
    CandidateOpKind.AFFINE_TANH,
    CandidateOpKind.AVG_POOL,
]


@pytest.fixture
def tiny_cell():
    return CellSpec(num_nodes=3, width=3, ops=SMOOTH_OPS)


@pytest.fixture
def tiny_dataset_spec():
    return DatasetSpec(num_classes=2, dim=2, per_class=20, test_per_class=10, unlabeled_per_class=10,
                       separation=2.0, seed=0)


@pytest.fixture
def tiny_data(tiny_dataset_spec):
    return build_task_data(tiny_dataset_spec)


@pytest.fixture
def tiny_net(tiny_cell, tiny_data):
    return NetworkSpec(tiny_cell, tiny_data.input_dim, tiny_data.num_classes)


@pytest.fixture
def tiny_engine():
    return EngineConfig(num_learners=2, tradeoff=0.5, xi_v=0.2, xi_w=0.2, eta_a=0.1,
                        arch_optimizer=ArchOptimizerKind.PLAIN, batch_size=8, steps=3)


@pytest.fixture
def tiny_group(tiny_engine, tiny_net, tiny_data):
    return init_group(tiny_engine, tiny_net, 1, tiny_data)


@pytest.fixture
def tiny_batches(tiny_group, tiny_data):
    return draw_batches(tiny_group, tiny_data)


def numeric_grad(fn, x, h=1e-6):
    """Central differences of a scalar function of a flat array."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for i in range(x.size):
        plus, minus = x.copy(), x.copy()
        plus[i] += h
        minus[i] -= h
        out[i] = (fn(plus) - fn(minus)) / (2 * h)
    return out
