"""Differentiable cell search space and genotype derivation."""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.autodiff import BoundParams, ParamVector, Tensor, conv1d_same, constant
from src.exceptions import ConfigError, ShapeError
from src.models import CandidateOpKind, CellSpec, Genotype, GenotypeEntry, NodeGenotype

CONV_TAPS = 3

# ArchParams are ParamVectors with one logit vector per edge.
ArchParams = ParamVector


@dataclass(frozen=True)
class CandidateOp:
    """One candidate operation on an edge, with its weight slot prefix."""
    kind: CandidateOpKind
    prefix: str

    @property
    def parametric(self) -> bool:
        return self.kind in (
            CandidateOpKind.AFFINE,
            CandidateOpKind.AFFINE_TANH,
            CandidateOpKind.AFFINE_RELU,
            CandidateOpKind.CONV,
        )

    def slot_shapes(self, width: int) -> List[Tuple[str, Tuple[int, ...]]]:
        if self.kind == CandidateOpKind.CONV:
            return [(f"{self.prefix}.kernel", (CONV_TAPS,)), (f"{self.prefix}.bias", (1,))]
        if self.parametric:
            return [(f"{self.prefix}.weight", (width, width)), (f"{self.prefix}.bias", (width,))]
        return []

    def apply(self, x: Tensor, weights: BoundParams) -> Tensor:
        kind = self.kind
        if kind == CandidateOpKind.ZERO:
            return constant(np.zeros_like(x.values))
        if kind == CandidateOpKind.IDENTITY:
            return x
        if kind == CandidateOpKind.AVG_POOL:
            kernel = constant(np.full(CONV_TAPS, 1.0 / CONV_TAPS, dtype=x.dtype))
            return conv1d_same(x, kernel)
        if kind == CandidateOpKind.CONV:
            return conv1d_same(x, weights[f"{self.prefix}.kernel"]) + weights[f"{self.prefix}.bias"]
        out = x @ weights[f"{self.prefix}.weight"] + weights[f"{self.prefix}.bias"]
        if kind == CandidateOpKind.AFFINE_TANH:
            return out.tanh()
        if kind == CandidateOpKind.AFFINE_RELU:
            return out.relu()
        return out


def edge_ops(spec: CellSpec, cell: int, edge: int) -> List[CandidateOp]:
    return [CandidateOp(kind, f"cell{cell}.edge{edge}.{kind.value}") for kind in spec.ops]


def arch_layout(spec: CellSpec) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f"edge{index}", (len(spec.ops),)) for index in range(len(spec.edge_list()))]


def init_arch(spec: CellSpec, dtype=np.float64) -> ArchParams:
    """Zero logits: every edge starts as the uniform mixture."""
    return ParamVector(arch_layout(spec), dtype=dtype)


def edge_probabilities(arch: ArchParams) -> Dict[str, np.ndarray]:
    """Softmax of every edge's logits."""
    probs = {}
    for name in arch.names:
        logits = arch.slot(name)
        e = np.exp(logits - logits.max())
        probs[name] = e / e.sum()
    return probs


def mixed_op_forward(edge_input: Tensor, edge_logits: Tensor, ops: Sequence[CandidateOp],
                     weights: BoundParams, width: Optional[int] = None, edge: str = "edge") -> Tensor:
    """Softmax-weighted sum of every candidate operation applied to the edge input."""
    if edge_logits.shape != (len(ops),):
        raise ShapeError(f"mixed op on {edge}: logits do not match {len(ops)} ops", edge_logits.shape)
    if edge_input.ndim != 2 or (width is not None and edge_input.shape[1] != width):
        raise ShapeError(f"mixed op on {edge}: input width", edge_input.shape, (edge_input.shape[0], width))
    mixture = edge_logits.softmax()
    out = None
    for index, op in enumerate(ops):
        term = mixture[index] * op.apply(edge_input, weights)
        out = term if out is None else out + term
    return out


def _check_incoming(spec: CellSpec, node: int) -> List[int]:
    incoming = spec.incoming(node)
    if not incoming:
        raise ConfigError(f"malformed cell: node {node} has no incoming edges")
    return incoming


def cell_forward(inputs: Sequence[Tensor], spec: CellSpec, arch: BoundParams, weights: BoundParams,
                 cell: int = 0) -> Tensor:
    """Output node of one mixed cell; `inputs` feed the input nodes in order."""
    nodes: List[Tensor] = list(inputs[:spec.num_input_nodes])
    if len(nodes) != spec.num_input_nodes:
        raise ShapeError(f"cell{cell}: expected {spec.num_input_nodes} inputs", (len(inputs),))
    edges = spec.edge_list()
    for node in range(spec.num_input_nodes, spec.num_nodes):
        total = None
        for index in _check_incoming(spec, node):
            source = edges[index][0]
            term = mixed_op_forward(
                nodes[source], arch[f"edge{index}"], edge_ops(spec, cell, index), weights,
                width=spec.width, edge=f"cell{cell}.edge{index}",
            )
            total = term if total is None else total + term
        nodes.append(total)
    return nodes[-1]


def genotype_cell_forward(inputs: Sequence[Tensor], spec: CellSpec, genotype: Genotype,
                          weights: BoundParams, cell: int = 0) -> Tensor:
    """Output node of a discrete cell built from the retained operations only."""
    nodes: List[Tensor] = list(inputs[:spec.num_input_nodes])
    for node in range(spec.num_input_nodes, spec.num_nodes):
        total = None
        for entry in genotype.entries_for(node):
            op = CandidateOp(entry.op, f"cell{cell}.edge{entry.edge}.{entry.op.value}")
            term = op.apply(nodes[entry.source], weights)
            total = term if total is None else total + term
        if total is None:
            total = constant(np.zeros_like(nodes[0].values))
        nodes.append(total)
    return nodes[-1]


def cell_weight_layout(spec: CellSpec, genotype: Optional[Genotype] = None) -> List[Tuple[str, Tuple[int, ...]]]:
    """Weight slots of every cell; only the retained operations when a genotype is given."""
    layout = []
    for cell in range(spec.num_cells):
        if genotype is None:
            for index in range(len(spec.edge_list())):
                for op in edge_ops(spec, cell, index):
                    layout.extend(op.slot_shapes(spec.width))
        else:
            for item in genotype.nodes:
                for entry in item.entries:
                    op = CandidateOp(entry.op, f"cell{cell}.edge{entry.edge}.{entry.op.value}")
                    layout.extend(op.slot_shapes(spec.width))
    return layout


def derive_genotype(arch: ArchParams, spec: CellSpec, k: Optional[int] = None) -> Genotype:
    """Retain, per computed node, the k incoming (edge, op) pairs with the largest weights.

    The zero operation never participates. Ties go to the lower edge index,
    then the lower op index.
    """
    k = spec.genotype_k if k is None else k
    if k < 1:
        raise ConfigError("genotype retention k must be at least 1")
    probs = edge_probabilities(arch)
    edges = spec.edge_list()
    nodes = []
    for node in range(spec.num_input_nodes, spec.num_nodes):
        candidates = []
        for index in _check_incoming(spec, node):
            weights = probs[f"edge{index}"]
            for op_index, kind in enumerate(spec.ops):
                if kind == CandidateOpKind.ZERO:
                    continue
                candidates.append((-float(weights[op_index]), index, op_index))
        candidates.sort()
        entries = [
            GenotypeEntry(edge=index, source=edges[index][0], op=spec.ops[op_index], weight=-neg_weight)
            for neg_weight, index, op_index in candidates[:k]
        ]
        nodes.append(NodeGenotype(node=node, entries=entries))
    return Genotype(k=k, nodes=nodes)
