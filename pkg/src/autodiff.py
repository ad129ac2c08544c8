"""Reverse-mode automatic differentiation over dense numpy arrays.

Tapes are define-by-run: every evaluation opens a fresh `Tape`, binds the
parameter vectors it differentiates as leaves, and discards the tape after
the gradient is read. Only first-order gradients are supported; mixed
second derivatives are formed elsewhere by differencing gradients.
"""

import threading
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.exceptions import ShapeError

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]
Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_local = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """Innermost tape opened on the calling thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Record:
    __slots__ = ("node", "parents", "backward")

    def __init__(self, node: int, parents: Tuple[Tuple[int, int], ...], backward: Backward):
        self.node = node
        # (position among the op's inputs, parent node id)
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for one evaluation."""

    def __init__(self):
        self._records: List[_Record] = []
        self._next_node = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def _new_node(self) -> int:
        node = self._next_node
        self._next_node += 1
        return node

    def watch(self, values: ArrayLike) -> "Tensor":
        """Register a leaf whose gradient may be requested."""
        return Tensor(values, node=self._new_node(), tape=self)

    def record(self, values: np.ndarray, inputs: Sequence["Tensor"], backward: Backward) -> "Tensor":
        parents = tuple(
            (position, tensor.node)
            for position, tensor in enumerate(inputs)
            if tensor.tape is self
        )
        out = Tensor(values, node=self._new_node(), tape=self)
        self._records.append(_Record(out.node, parents, backward))
        return out

    def gradient(self, output: "Tensor", wrt: Sequence["Tensor"]) -> List[np.ndarray]:
        """Gradients of a scalar output; unreachable inputs get exact zeros."""
        if output.values.ndim != 0:
            raise ShapeError("grad: output must be a scalar", output.shape)
        zeros = [np.zeros_like(tensor.values) for tensor in wrt]
        if output.tape is not self:
            return zeros

        accumulators: Dict[int, np.ndarray] = {output.node: np.ones_like(output.values)}
        # Records are appended in creation order, so reversed order is reverse topological.
        for record in reversed(self._records):
            upstream = accumulators.get(record.node)
            if upstream is None or not record.parents:
                continue
            grads = record.backward(upstream)
            for position, parent in record.parents:
                contribution = grads[position]
                if contribution is None:
                    continue
                if parent in accumulators:
                    accumulators[parent] = accumulators[parent] + contribution
                else:
                    accumulators[parent] = np.array(contribution, copy=True)

        return [
            accumulators[tensor.node].reshape(tensor.shape) if tensor.tape is self and tensor.node in accumulators
            else zero
            for tensor, zero in zip(wrt, zeros)
        ]


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _result(values: np.ndarray, inputs: Sequence["Tensor"], backward: Backward) -> "Tensor":
    tape = active_tape()
    if tape is None or not any(tensor.tape is tape for tensor in inputs):
        return Tensor(values)
    return tape.record(values, inputs, backward)


def _broadcast_shape(operation: str, left: "Tensor", right: "Tensor") -> None:
    try:
        np.broadcast_shapes(left.shape, right.shape)
    except ValueError:
        raise ShapeError(operation, left.shape, right.shape) from None


class Tensor:
    """Dense array optionally attached to a tape."""
    __slots__ = ("values", "node", "tape")
    __array_priority__ = 1000

    def __init__(self, values: ArrayLike, node: Optional[int] = None, tape: Optional[Tape] = None):
        self.values = np.asarray(values)
        self.node = node
        self.tape = tape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, attached={self.tape is not None})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def item(self) -> float:
        return float(self.values)

    def _coerce(self, other: Union["Tensor", ArrayLike]) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.values.dtype))

    # Elementwise arithmetic

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        _broadcast_shape("add", self, other)
        a_shape, b_shape = self.shape, other.shape
        return _result(
            self.values + other.values,
            (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)),
        )

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return _result(-self.values, (self,), lambda g: (-g,))

    def __sub__(self, other) -> "Tensor":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) + (-self)

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        _broadcast_shape("multiply", self, other)
        a, b = self.values, other.values
        return _result(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by constants")
        return self * (1.0 / np.asarray(other, dtype=self.values.dtype))

    def __matmul__(self, other) -> "Tensor":
        other = self._coerce(other)
        a, b = self.values, other.values
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError("matmul", a.shape, b.shape)
        return _result(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g))

    def __getitem__(self, index) -> "Tensor":
        source_shape, dtype = self.shape, self.values.dtype

        def backward(g):
            full = np.zeros(source_shape, dtype=dtype)
            np.add.at(full, index, g)
            return (full,)

        return _result(self.values[index], (self,), backward)

    # Nonlinearities

    def tanh(self) -> "Tensor":
        y = np.tanh(self.values)
        return _result(y, (self,), lambda g: (g * (1.0 - y * y),))

    def relu(self) -> "Tensor":
        mask = (self.values > 0).astype(self.values.dtype)
        return _result(self.values * mask, (self,), lambda g: (g * mask,))

    def exp(self) -> "Tensor":
        y = np.exp(self.values)
        return _result(y, (self,), lambda g: (g * y,))

    def log(self, floor: Optional[float] = None) -> "Tensor":
        """Natural log, optionally of max(x, floor); clamped entries get zero gradient."""
        x = self.values
        if floor is None:
            return _result(np.log(x), (self,), lambda g: (g / x,))
        clamped = np.maximum(x, floor)
        passed = (x > floor).astype(x.dtype)
        return _result(np.log(clamped), (self,), lambda g: (g * passed / clamped,))

    def softmax(self) -> "Tensor":
        """Softmax over the last axis."""
        shifted = self.values - self.values.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=-1, keepdims=True)
        return _result(y, (self,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))

    # Reductions and reshaping

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _result(self.values.sum(axis=axis), (self,), backward)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        count = self.values.size if axis is None else self.shape[axis]
        return self.sum(axis=axis) * (1.0 / count)

    def reshape(self, *shape: int) -> "Tensor":
        source_shape = self.shape
        try:
            values = self.values.reshape(*shape)
        except ValueError:
            raise ShapeError("reshape", source_shape, tuple(shape)) from None
        return _result(values, (self,), lambda g: (g.reshape(source_shape),))

    @property
    def T(self) -> "Tensor":
        return _result(self.values.T, (self,), lambda g: (g.T,))


def constant(values: ArrayLike, dtype=None) -> Tensor:
    """Tensor detached from every tape."""
    return Tensor(np.asarray(values, dtype=dtype))


def conv1d_same(x: Tensor, kernel: Tensor) -> Tensor:
    """Zero-padded 1-D convolution of every row of `x` with an odd-length kernel."""
    if x.ndim != 2 or kernel.ndim != 1 or kernel.shape[0] % 2 == 0:
        raise ShapeError("conv1d", x.shape, kernel.shape)
    rows, width = x.shape
    taps = kernel.shape[0]
    radius = taps // 2
    padded = np.pad(x.values, ((0, 0), (radius, radius)))
    k = kernel.values
    # windows[:, i, t] = padded[:, i + t]
    windows = np.stack([padded[:, t:t + width] for t in range(taps)], axis=-1)
    out = windows @ k

    def backward(g):
        grad_kernel = np.einsum("ri,rit->t", g, windows)
        grad_padded = np.zeros_like(padded)
        for t in range(taps):
            grad_padded[:, t:t + width] += g * k[t]
        return (grad_padded[:, radius:radius + width], grad_kernel)

    return _result(out, (x, kernel), backward)


class ParamVector:
    """Flat vector over a named, ordered collection of arrays."""

    def __init__(self, layout: Iterable[Tuple[str, Sequence[int]]], values: Optional[ArrayLike] = None,
                 dtype=np.float64):
        self.layout: Tuple[Tuple[str, Tuple[int, ...]], ...] = tuple(
            (name, tuple(int(extent) for extent in shape)) for name, shape in layout
        )
        self._slices: Dict[str, Tuple[int, int, Tuple[int, ...]]] = {}
        offset = 0
        for name, shape in self.layout:
            if name in self._slices:
                raise ValueError(f"duplicate parameter name {name!r}")
            size = int(np.prod(shape, dtype=np.int64))
            self._slices[name] = (offset, offset + size, shape)
            offset += size
        self.size = offset
        if values is None:
            self.values = np.zeros(offset, dtype=dtype)
        else:
            flat = np.array(values, dtype=np.asarray(values).dtype if dtype is None else dtype).reshape(-1)
            if flat.shape != (offset,):
                raise ShapeError("ParamVector", (offset,), np.asarray(values).shape)
            self.values = flat

    def __len__(self) -> int:
        return self.size

    def __repr__(self) -> str:
        return f"ParamVector(slots={len(self.layout)}, size={self.size})"

    @property
    def names(self) -> List[str]:
        return [name for name, _ in self.layout]

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    @classmethod
    def from_arrays(cls, arrays: Dict[str, ArrayLike], dtype=np.float64) -> "ParamVector":
        layout = [(name, np.shape(array)) for name, array in arrays.items()]
        flat = [np.asarray(array, dtype=dtype).reshape(-1) for array in arrays.values()]
        values = np.concatenate(flat) if flat else np.zeros(0, dtype=dtype)
        return cls(layout, values, dtype=dtype)

    def slot(self, name: str) -> np.ndarray:
        """Writable view of one named array."""
        start, stop, shape = self._slices[name]
        return self.values[start:stop].reshape(shape)

    def unflatten(self) -> Dict[str, np.ndarray]:
        return {name: self.slot(name).copy() for name in self.names}

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self.values.copy(), dtype=self.dtype)

    def with_values(self, values: ArrayLike) -> "ParamVector":
        return ParamVector(self.layout, values, dtype=self.dtype)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.layout, dtype=self.dtype)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def shifted(self, direction: Union["ParamVector", np.ndarray], alpha: float) -> "ParamVector":
        """This vector moved by `alpha` along `direction`."""
        step = direction.values if isinstance(direction, ParamVector) else np.asarray(direction)
        if step.shape != self.values.shape:
            raise ShapeError("shift", self.values.shape, step.shape)
        return self.with_values(self.values + alpha * step)

    def bind(self, tape: Optional[Tape] = None, trainable: bool = True) -> "BoundParams":
        """Tensors for every slot; leaves on `tape` when trainable, constants otherwise."""
        tensors = {}
        for name in self.names:
            array = self.slot(name).copy()
            if trainable and tape is not None:
                tensors[name] = tape.watch(array)
            else:
                tensors[name] = Tensor(array)
        return BoundParams(self, tensors)

    def constants(self) -> "BoundParams":
        return self.bind(None, trainable=False)


class BoundParams:
    """Named tensors of one ParamVector, as seen by a single evaluation."""

    def __init__(self, params: ParamVector, tensors: Dict[str, Tensor]):
        self.params = params
        self._tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def tensors(self) -> List[Tensor]:
        return [self._tensors[name] for name in self.params.names]


def _tape_of(output: Tensor, bound: Sequence[BoundParams]) -> Optional[Tape]:
    if output.tape is not None:
        return output.tape
    for params in bound:
        for tensor in params.tensors():
            if tensor.tape is not None:
                return tensor.tape
    return None


def grad_many(scalar_output: Tensor, *wrt: BoundParams) -> List[ParamVector]:
    """Gradients of one scalar with respect to several bound parameter vectors."""
    if scalar_output.values.ndim != 0:
        raise ShapeError("grad: output must be a scalar", scalar_output.shape)
    tape = _tape_of(scalar_output, wrt)
    tensors = [tensor for params in wrt for tensor in params.tensors()]
    if tape is None:
        grads = [np.zeros_like(tensor.values) for tensor in tensors]
    else:
        grads = tape.gradient(scalar_output, tensors)
    results, cursor = [], 0
    for params in wrt:
        count = len(params.params.layout)
        flat = [g.reshape(-1) for g in grads[cursor:cursor + count]]
        cursor += count
        values = np.concatenate(flat) if flat else np.zeros(0, dtype=params.params.dtype)
        results.append(params.params.with_values(values))
    return results


def grad(scalar_output: Tensor, wrt: BoundParams) -> ParamVector:
    """d(scalar_output)/d(wrt) as a flat vector with the layout of `wrt`."""
    return grad_many(scalar_output, wrt)[0]


LossBuilder = Callable[[BoundParams, BoundParams], Tensor]


def value_and_grad(scalar_builder: LossBuilder, at: ParamVector, wrt: ParamVector) -> Tuple[float, ParamVector]:
    """Evaluate builder(at, wrt) on a fresh tape with `at` held constant."""
    with Tape() as tape:
        held = at.bind(tape, trainable=False)
        free = wrt.bind(tape)
        output = scalar_builder(held, free)
        return float(output.values), grad(output, free)


def grad_of_inner_product(scalar_builder: LossBuilder, at: ParamVector, wrt: ParamVector) -> ParamVector:
    """Gradient with respect to `wrt` with `at` held at the supplied, possibly shifted, point.

    This is the first-order building block of the finite-difference
    Hessian-vector products: evaluated at at ± alpha * u, the difference of two
    calls approximates the mixed second derivative applied to u.
    """
    return value_and_grad(scalar_builder, at, wrt)[1]
