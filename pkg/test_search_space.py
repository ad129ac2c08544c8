"""Tests for the cell search space and genotype derivation."""

import numpy as np
import pytest

from conftest import SMOOTH_OPS
from src.autodiff import ParamVector, constant
from src.exceptions import ConfigError, ShapeError
from src.learner import NetworkSpec, init_weights, predict_proba
from src.models import CandidateOpKind, CellSpec
from src.search_space import (
    CandidateOp,
    derive_genotype,
    edge_ops,
    edge_probabilities,
    init_arch,
    mixed_op_forward,
)


def test_default_edge_list_is_full_dag_ordered_by_target():
    spec = CellSpec(num_nodes=4, num_input_nodes=1)
    assert spec.edge_list() == [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)]
    assert spec.incoming(3) == [3, 4, 5]


def test_cell_spec_rejects_malformed_topology():
    with pytest.raises(ValueError):
        CellSpec(num_nodes=3, edges=[(2, 1)])
    with pytest.raises(ValueError):
        CellSpec(num_nodes=2, num_input_nodes=2)


def test_zero_logits_give_uniform_mixture():
    arch = init_arch(CellSpec(ops=SMOOTH_OPS))
    for probs in edge_probabilities(arch).values():
        np.testing.assert_allclose(probs, np.full(len(SMOOTH_OPS), 1.0 / len(SMOOTH_OPS)))


def test_mixed_op_is_softmax_weighted_sum():
    ops = [CandidateOp(CandidateOpKind.ZERO, "e"), CandidateOp(CandidateOpKind.IDENTITY, "e")]
    x = constant(np.array([[1.0, -2.0, 3.0]]))
    logits = constant(np.array([0.0, np.log(3.0)]))
    out = mixed_op_forward(x, logits, ops, weights=None, width=3)
    np.testing.assert_allclose(out.values, 0.75 * x.values)


def test_mixed_op_rejects_wrong_logit_count():
    ops = edge_ops(CellSpec(ops=SMOOTH_OPS), 0, 0)
    with pytest.raises(ShapeError):
        mixed_op_forward(constant(np.ones((1, 4))), constant(np.zeros(2)), ops, weights=None, width=4)


def test_avg_pool_averages_neighbours_with_zero_padding():
    op = CandidateOp(CandidateOpKind.AVG_POOL, "p")
    out = op.apply(constant(np.array([[3.0, 6.0, 9.0]])), weights=None)
    np.testing.assert_allclose(out.values, [[3.0, 6.0, 5.0]])


def test_derive_genotype_breaks_ties_by_edge_then_op():
    spec = CellSpec(num_nodes=3, ops=SMOOTH_OPS)
    genotype = derive_genotype(init_arch(spec), spec)
    assert [(n.node, [(e.edge, e.op) for e in n.entries]) for n in genotype.nodes] == [
        (1, [(0, CandidateOpKind.IDENTITY)]),
        (2, [(1, CandidateOpKind.IDENTITY)]),
    ]


def test_derive_genotype_never_keeps_zero():
    spec = CellSpec(num_nodes=3, ops=SMOOTH_OPS)
    arch = init_arch(spec)
    for name in arch.names:
        arch.slot(name)[0] = 50.0
    genotype = derive_genotype(arch, spec)
    assert all(e.op != CandidateOpKind.ZERO for n in genotype.nodes for e in n.entries)


def test_derive_genotype_properties_on_random_logits():
    spec = CellSpec(num_nodes=4, ops=SMOOTH_OPS)
    rng = np.random.default_rng(0)
    for trial in range(1000):
        k = int(rng.integers(1, 4))
        arch = init_arch(spec).with_values(rng.normal(scale=3.0, size=init_arch(spec).size))
        genotype = derive_genotype(arch, spec, k=k)
        for node in genotype.nodes:
            available = len(spec.incoming(node.node)) * (len(spec.ops) - 1)
            assert len(node.entries) == min(k, available)
            assert all(e.op != CandidateOpKind.ZERO for e in node.entries)
        shifted = arch.copy()
        edge = f"edge{int(rng.integers(0, len(spec.edge_list())))}"
        shifted.slot(edge)[...] += rng.normal(scale=10.0)
        again = derive_genotype(shifted, spec, k=k)
        assert [[(e.edge, e.op) for e in n.entries] for n in again.nodes] == \
            [[(e.edge, e.op) for e in n.entries] for n in genotype.nodes]


def test_derive_genotype_rejects_nonpositive_k():
    spec = CellSpec(num_nodes=3)
    with pytest.raises(ConfigError):
        derive_genotype(init_arch(spec), spec, k=0)


def test_one_hot_logits_match_the_discrete_network():
    spec = CellSpec(num_nodes=3, width=3, ops=SMOOTH_OPS)
    net = NetworkSpec(spec, input_dim=2, num_classes=2)
    arch = init_arch(spec)
    # edge0 (0->1): affine_tanh, edge1 (0->2): zero, edge2 (1->2): affine
    arch.slot("edge0")[SMOOTH_OPS.index(CandidateOpKind.AFFINE_TANH)] = 60.0
    arch.slot("edge1")[SMOOTH_OPS.index(CandidateOpKind.ZERO)] = 60.0
    arch.slot("edge2")[SMOOTH_OPS.index(CandidateOpKind.AFFINE)] = 60.0
    genotype = derive_genotype(arch, spec)
    assert [(e.edge, e.op) for n in genotype.nodes for e in n.entries] == [
        (0, CandidateOpKind.AFFINE_TANH), (2, CandidateOpKind.AFFINE),
    ]

    weights = init_weights(net, np.random.default_rng(4))
    discrete = net.discrete(genotype)
    discrete_weights = ParamVector.from_arrays({name: weights.slot(name) for name, _ in discrete.weight_layout()})
    x = np.random.default_rng(5).normal(size=(6, 2))
    mixed = predict_proba(x, weights.constants(), arch.constants(), net).values
    fixed = predict_proba(x, discrete_weights.constants(), None, discrete).values
    np.testing.assert_allclose(mixed, fixed, atol=1e-12)
    assert discrete_weights.size < weights.size
