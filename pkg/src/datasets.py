"""Training, validation, test and unlabeled data: generators, CSV ingestion and sampling."""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from src.autodiff import Tensor
from src.exceptions import DatasetError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabeledDataset:
    """Rows of inputs with integer labels in 0..num_classes-1."""
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        if self.inputs.ndim != 2:
            raise DatasetError(f"inputs must be a matrix, got shape {self.inputs.shape}")
        if len(self.inputs) != len(self.labels):
            raise DatasetError(f"{len(self.inputs)} input rows but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels must lie in 0..{self.num_classes - 1}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def width(self) -> int:
        return self.inputs.shape[1]

    def take(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.inputs[indices], self.labels[indices], self.num_classes, self.provenance)


@dataclass(frozen=True)
class UnlabeledDataset:
    """Inputs only, the pool pseudo-labels are produced on."""
    inputs: np.ndarray
    provenance: str = ""

    def __post_init__(self):
        if self.inputs.ndim != 2 or len(self.inputs) == 0:
            raise DatasetError(f"unlabeled pool must be a nonempty matrix, got shape {self.inputs.shape}")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def width(self) -> int:
        return self.inputs.shape[1]

    def take(self, indices: np.ndarray) -> "UnlabeledDataset":
        return UnlabeledDataset(self.inputs[indices], self.provenance)


@dataclass
class PseudoLabeledDataset:
    """Unlabeled inputs with learner `producer`'s soft labels (possibly tape-attached)."""
    inputs: np.ndarray
    soft_labels: Tensor
    producer: int

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass(frozen=True)
class TaskData:
    """The four data roles of one experiment."""
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    unlabeled: UnlabeledDataset

    @property
    def input_dim(self) -> int:
        return self.train.width

    @property
    def num_classes(self) -> int:
        return self.train.num_classes


def make_gaussian_mixture(classes: int, per_class: int, dim: int, separation: float, seed: int,
                          label_noise: float = 0.0, shift: float = 0.0, dtype=np.float64) -> LabeledDataset:
    """Unit-variance Gaussian classes with centers `separation` away from the origin.

    Centers sit evenly on a circle in a seeded random plane (on a line when
    dim == 1), so every pair is at least separation * 2 sin(pi / classes)
    apart. With label_noise > 0 that fraction of labels is resampled uniformly.
    """
    if classes < 2 or per_class < 1:
        raise DatasetError("need at least two classes and one row per class")
    rng = np.random.default_rng(seed)
    if dim == 1:
        centers = separation * (np.arange(classes) - (classes - 1) / 2.0)[:, None]
    else:
        basis, _ = np.linalg.qr(rng.normal(size=(dim, 2)))
        angles = rng.uniform(0.0, 2.0 * np.pi) + 2.0 * np.pi * np.arange(classes) / classes
        centers = separation * (np.cos(angles)[:, None] * basis[:, 0] + np.sin(angles)[:, None] * basis[:, 1])
    labels = np.repeat(np.arange(classes), per_class)
    inputs = centers[labels] + rng.normal(size=(len(labels), dim)) + shift
    if label_noise > 0:
        flip = rng.uniform(size=len(labels)) < label_noise
        labels = np.where(flip, rng.integers(0, classes, size=len(labels)), labels)
    order = rng.permutation(len(labels))
    return LabeledDataset(
        inputs[order].astype(dtype),
        labels[order].astype(np.int64),
        classes,
        provenance=f"gaussian_mixture(seed={seed})",
    )


def split_train_val(data: LabeledDataset, fraction: float = 0.5, seed: int = 0) -> Tuple[LabeledDataset, LabeledDataset]:
    """Seeded disjoint split; `fraction` of the rows go to the first part."""
    if not 0.0 < fraction < 1.0:
        raise DatasetError(f"split fraction must lie strictly between 0 and 1, got {fraction}")
    order = np.random.default_rng(seed).permutation(len(data))
    cut = int(round(fraction * len(data)))
    if cut == 0 or cut == len(data):
        raise DatasetError(f"splitting {len(data)} rows at fraction {fraction} leaves one side empty")
    return data.take(np.sort(order[:cut])), data.take(np.sort(order[cut:]))


def concat(first: LabeledDataset, second: LabeledDataset) -> LabeledDataset:
    if first.width != second.width or first.num_classes != second.num_classes:
        raise DatasetError("cannot concatenate datasets of different widths or class counts")
    return LabeledDataset(
        np.concatenate([first.inputs, second.inputs]),
        np.concatenate([first.labels, second.labels]),
        first.num_classes,
        provenance=f"{first.provenance}+{second.provenance}",
    )


def cross_unlabeled(other: LabeledDataset, width: Optional[int] = None) -> UnlabeledDataset:
    """Strip the labels of another dataset to use it as the unlabeled pool."""
    if width is not None and other.width != width:
        raise DatasetError(f"unlabeled pool width {other.width} does not match task width {width}")
    return UnlabeledDataset(other.inputs, provenance=other.provenance)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path: Union[str, Path], label_column: int = -1, dtype=np.float64) -> LabeledDataset:
    """Parse a rectangular numeric CSV; a non-numeric first row is taken as a header."""
    try:
        frame = pd.read_csv(path, header=None, dtype=str, keep_default_na=False, skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        raise DatasetError(f"{path}: file is empty") from None
    except pd.errors.ParserError as exc:
        raise DatasetError(f"{path}: ragged rows ({exc})") from None

    first_line = 1
    if len(frame) and not all(_is_number(cell) for cell in frame.iloc[0]):
        frame = frame.iloc[1:]
        first_line = 2
    if frame.empty:
        raise DatasetError(f"{path}: no data rows")

    cells = frame.to_numpy(dtype=object)
    for offset, row in enumerate(cells):
        if any(not isinstance(cell, str) or cell == "" for cell in row):
            raise DatasetError(f"{path}: row {first_line + offset} is ragged")
        for cell in row:
            if not _is_number(cell):
                raise DatasetError(f"{path}: row {first_line + offset} has non-numeric cell {cell!r}")
    values = cells.astype(np.float64)

    column = label_column % values.shape[1]
    raw_labels = values[:, column]
    for offset, label in enumerate(raw_labels):
        if label < 0 or label != np.floor(label):
            raise DatasetError(f"{path}: row {first_line + offset} has invalid label {label!r}")
    labels = raw_labels.astype(np.int64)
    inputs = np.delete(values, column, axis=1).astype(dtype)
    return LabeledDataset(inputs, labels, int(labels.max()) + 1, provenance=str(path))


def save_csv(data: LabeledDataset, path: Union[str, Path], header: bool = True) -> None:
    """Write inputs then the label as the last column; floats keep their exact repr."""
    frame = pd.DataFrame(data.inputs, columns=[f"x{i}" for i in range(data.width)])
    frame["label"] = data.labels
    frame.to_csv(path, index=False, header=header, lineterminator="\n")


class MinibatchSampler:
    """Sampling without replacement within an epoch, reshuffled every epoch."""

    def __init__(self, size: int, batch_size: int, rng: np.random.Generator):
        if batch_size < 1:
            raise DatasetError("batch size must be at least 1")
        self.size = size
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.zeros(0, dtype=np.int64)
        self._cursor = 0

    def next_indices(self) -> np.ndarray:
        if self._cursor >= len(self._order):
            self._order = self.rng.permutation(self.size)
            self._cursor = 0
        stop = min(self._cursor + self.batch_size, len(self._order))
        indices = self._order[self._cursor:stop]
        self._cursor = stop
        return indices

    def minibatch(self, data):
        """Next batch view of `data` (labeled or unlabeled)."""
        if len(data) != self.size:
            raise DatasetError(f"sampler built for {self.size} rows, got {len(data)}")
        return data.take(self.next_indices())

    def state_dict(self) -> Dict[str, Any]:
        return {
            "size": self.size,
            "batch_size": self.batch_size,
            "rng": self.rng.bit_generator.state,
            "order": self._order.tolist(),
            "cursor": self._cursor,
        }

    @classmethod
    def from_state(cls, state: Dict[str, Any]) -> "MinibatchSampler":
        rng = np.random.default_rng()
        rng.bit_generator.state = state["rng"]
        sampler = cls(int(state["size"]), int(state["batch_size"]), rng)
        sampler._order = np.asarray(state["order"], dtype=np.int64)
        sampler._cursor = int(state["cursor"])
        return sampler


def minibatch(data, batch_size: int, rng: np.random.Generator):
    """One batch drawn with a throwaway sampler; long runs keep a MinibatchSampler."""
    return MinibatchSampler(len(data), batch_size, rng).minibatch(data)


def build_task_data(spec, dtype=np.float64) -> TaskData:
    """Assemble train/val/test/unlabeled roles from a DatasetSpec."""
    if spec.source == "csv":
        pool = load_csv(spec.train_csv, spec.label_column, dtype)
        test = load_csv(spec.test_csv, spec.label_column, dtype)
        unlabeled = cross_unlabeled(load_csv(spec.unlabeled_csv, spec.label_column, dtype), pool.width)
        if test.width != pool.width:
            raise DatasetError(f"test width {test.width} does not match train width {pool.width}")
        num_classes = max(pool.num_classes, test.num_classes)
        pool = LabeledDataset(pool.inputs, pool.labels, num_classes, pool.provenance)
        test = LabeledDataset(test.inputs, test.labels, num_classes, test.provenance)
    else:
        total = spec.per_class + spec.test_per_class
        everything = make_gaussian_mixture(
            spec.num_classes, total, spec.dim, spec.separation, spec.seed,
            label_noise=spec.label_noise, dtype=dtype,
        )
        pool, test = split_train_val(everything, spec.per_class / total, seed=spec.seed)
        other = make_gaussian_mixture(
            spec.num_classes, spec.unlabeled_per_class, spec.dim, spec.separation, spec.seed + 1,
            shift=spec.unlabeled_shift, dtype=dtype,
        )
        unlabeled = cross_unlabeled(other, pool.width)
    train, val = split_train_val(pool, spec.train_fraction, seed=spec.seed)
    logger.info("data train=%d val=%d test=%d unlabeled=%d width=%d classes=%d",
                len(train), len(val), len(test), len(unlabeled), train.width, train.num_classes)
    return TaskData(train=train, val=val, test=test, unlabeled=unlabeled)
