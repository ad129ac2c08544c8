"""One learner: architecture A_k, weight sets V_k and W_k, losses and pseudo-labels."""

import copy
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from src.autodiff import BoundParams, ParamVector, Tensor, constant
from src.config import config
from src.datasets import LabeledDataset, PseudoLabeledDataset
from src.exceptions import DatasetError, ShapeError
from src.models import CellSpec, Genotype
from src.search_space import (
    ArchParams,
    arch_layout,
    cell_forward,
    cell_weight_layout,
    genotype_cell_forward,
    init_arch,
)

logger = logging.getLogger(__name__)

Inputs = Union[np.ndarray, Tensor]


@dataclass(frozen=True)
class NetworkSpec:
    """Shape of a learner's network: stem, stacked cells and a linear head."""
    cell: CellSpec
    input_dim: int
    num_classes: int
    genotype: Optional[Genotype] = None

    @property
    def has_stem(self) -> bool:
        return self.input_dim != self.cell.width

    def weight_layout(self):
        width = self.cell.width
        layout = []
        if self.has_stem:
            layout += [("stem.weight", (self.input_dim, width)), ("stem.bias", (width,))]
        layout += cell_weight_layout(self.cell, self.genotype)
        layout += [("head.weight", (width, self.num_classes)), ("head.bias", (self.num_classes,))]
        return layout

    def arch_layout(self):
        return arch_layout(self.cell)

    def discrete(self, genotype: Genotype) -> "NetworkSpec":
        return NetworkSpec(self.cell, self.input_dim, self.num_classes, genotype)


def init_weights(net: NetworkSpec, rng: np.random.Generator, dtype=np.float64) -> ParamVector:
    """Scaled normal (std sqrt(2 / fan-in)) for weight matrices and kernels, zero biases."""
    params = ParamVector(net.weight_layout(), dtype=dtype)
    for name, shape in params.layout:
        if name.endswith(".bias"):
            continue
        fan_in = shape[0]
        params.slot(name)[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return params


@dataclass
class LearnerState:
    """Learner k: (A_k, V_k, W_k) plus its own random stream."""
    index: int
    net: NetworkSpec
    arch: ArchParams
    v: ParamVector
    w: ParamVector
    seed: int
    rng: np.random.Generator = field(repr=False)

    def __post_init__(self):
        if not self.v.same_layout(self.w):
            raise ShapeError("learner weights: V and W layouts differ", (self.v.size,), (self.w.size,))

    def copy(self) -> "LearnerState":
        return LearnerState(
            index=self.index,
            net=self.net,
            arch=self.arch.copy(),
            v=self.v.copy(),
            w=self.w.copy(),
            seed=self.seed,
            rng=copy.deepcopy(self.rng),
        )

    def num_weights(self) -> int:
        return self.v.size


def init_learner(index: int, net: NetworkSpec, seed: int, dtype=np.float64) -> LearnerState:
    rng = np.random.default_rng(seed)
    v = init_weights(net, rng, dtype)
    w = init_weights(net, rng, dtype)
    return LearnerState(index=index, net=net, arch=init_arch(net.cell, dtype), v=v, w=w, seed=seed, rng=rng)


def _as_tensor(x: Inputs) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def network_logits(x: Inputs, weights: BoundParams, arch: Optional[BoundParams], net: NetworkSpec) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeError("network input", x.shape, (x.shape[0] if x.ndim else 0, net.input_dim))
    hidden = x
    if net.has_stem:
        hidden = (hidden @ weights["stem.weight"] + weights["stem.bias"]).tanh()
    prev_prev = prev = hidden
    for cell in range(net.cell.num_cells):
        inputs = [prev] if net.cell.num_input_nodes == 1 else [prev_prev, prev]
        if net.genotype is None:
            out = cell_forward(inputs, net.cell, arch, weights, cell=cell)
        else:
            out = genotype_cell_forward(inputs, net.cell, net.genotype, weights, cell=cell)
        prev_prev, prev = prev, out
    return prev @ weights["head.weight"] + weights["head.bias"]


def predict_proba(x: Inputs, weights: BoundParams, arch: Optional[BoundParams], net: NetworkSpec) -> Tensor:
    """Class-probability rows f(x; weights) under architecture `arch`."""
    return network_logits(x, weights, arch, net).softmax()


def hard_ce_loss(weights: BoundParams, arch: Optional[BoundParams], net: NetworkSpec, batch: LabeledDataset) -> Tensor:
    """Mean of -log p[true class] over the batch."""
    labels = np.asarray(batch.labels)
    if labels.size == 0:
        raise DatasetError("cannot evaluate the loss of an empty batch")
    if labels.min() < 0 or labels.max() >= net.num_classes:
        raise DatasetError(f"labels must lie in 0..{net.num_classes - 1}, got range {labels.min()}..{labels.max()}")
    probs = predict_proba(batch.inputs, weights, arch, net)
    picked = probs[(np.arange(len(labels)), labels)]
    return -picked.log(floor=config.LOG_FLOOR).mean()


def soft_ce_loss(weights: BoundParams, arch: Optional[BoundParams], net: NetworkSpec, inputs: Inputs,
                 targets: Tensor) -> Tensor:
    """Mean of -sum_j target_j log pred_j; gradients flow into attached targets too."""
    target_values = targets.values
    if target_values.ndim != 2 or target_values.shape[1] != net.num_classes:
        raise ShapeError("soft targets", target_values.shape, (target_values.shape[0], net.num_classes))
    deviation = np.abs(target_values.sum(axis=1) - 1.0)
    if deviation.size and (deviation.max() > config.SOFT_LABEL_TOL or target_values.min() < 0):
        row = int(np.argmax(deviation))
        raise DatasetError(f"soft target row {row} is not a probability vector (sum deviates by {deviation[row]:.3g})")
    probs = predict_proba(inputs, weights, arch, net)
    return -(targets * probs.log(floor=config.LOG_FLOOR)).sum(axis=1).mean()


def generate_pseudo_dataset(unlabeled: np.ndarray, producer_weights: BoundParams, producer_arch: Optional[BoundParams],
                            net: NetworkSpec, producer: int, harden: bool = False) -> PseudoLabeledDataset:
    """Pair every unlabeled input with the producer's predicted class probabilities."""
    if len(unlabeled) == 0:
        raise DatasetError("cannot pseudo-label an empty batch")
    labels = predict_proba(unlabeled, producer_weights, producer_arch, net)
    tolerance = config.PROB_TOL_F64 if labels.values.dtype == np.float64 else config.PROB_TOL
    row_sums = labels.values.sum(axis=1)
    if not np.all(np.isfinite(labels.values)) or np.max(np.abs(row_sums - 1.0)) > tolerance:
        raise DatasetError(f"pseudo-labels of learner {producer} are not probability vectors "
                           f"(row sums {row_sums.min():.6g}..{row_sums.max():.6g})")
    if harden:
        hard = np.zeros_like(labels.values)
        hard[np.arange(len(hard)), labels.values.argmax(axis=1)] = 1.0
        labels = constant(hard)
    return PseudoLabeledDataset(inputs=unlabeled, soft_labels=labels, producer=producer)


def accuracy(weights: ParamVector, arch: Optional[ArchParams], net: NetworkSpec, data: LabeledDataset) -> float:
    if len(data) == 0:
        return 0.0
    probs = predict_proba(data.inputs, weights.constants(), None if arch is None else arch.constants(), net)
    return float(np.mean(probs.values.argmax(axis=1) == data.labels))


def evaluate(weights: ParamVector, arch: Optional[ArchParams], net: NetworkSpec, data: LabeledDataset) -> Tuple[float, float]:
    """(cross-entropy, accuracy) of a detached forward pass."""
    loss = hard_ce_loss(weights.constants(), None if arch is None else arch.constants(), net, data)
    return float(loss.values), accuracy(weights, arch, net, data)
