"""Update rules for the architecture logits.

Both optimizers are functional: `step` takes the current logits, the
gradient and the optimizer state, and returns fresh logits and a fresh
state without touching its inputs, so a failed search step can be dropped
without rollback.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

from src.autodiff import ParamVector
from src.exceptions import ShapeError
from src.models import ArchOptimizerKind, EngineConfig


@dataclass(frozen=True)
class AdamState:
    """First and second moment estimates plus the step count."""
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {"m": self.m, "v": self.v, "t": self.t}

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "AdamState":
        return cls(np.asarray(payload["m"]), np.asarray(payload["v"]), int(payload["t"]))


class PlainDescent:
    """A <- A - eta * g."""

    kind = ArchOptimizerKind.PLAIN

    def __init__(self, lr: float):
        self.lr = lr

    def init_state(self, arch: ParamVector) -> Optional[AdamState]:
        return None

    def step(self, arch: ParamVector, gradient: ParamVector,
             state: Optional[AdamState]) -> Tuple[ParamVector, Optional[AdamState]]:
        if not arch.same_layout(gradient):
            raise ShapeError("arch update", (arch.size,), (gradient.size,))
        return arch.shifted(gradient, -self.lr), None


class AdamW:
    """Adam with decoupled weight decay."""

    kind = ArchOptimizerKind.ADAM

    def __init__(self, lr: float, weight_decay: float, betas: Tuple[float, float], eps: float):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps

    def init_state(self, arch: ParamVector) -> AdamState:
        return AdamState(np.zeros_like(arch.values), np.zeros_like(arch.values), 0)

    def step(self, arch: ParamVector, gradient: ParamVector,
             state: Optional[AdamState]) -> Tuple[ParamVector, AdamState]:
        if not arch.same_layout(gradient):
            raise ShapeError("arch update", (arch.size,), (gradient.size,))
        state = state if state is not None else self.init_state(arch)
        g = gradient.values
        t = state.t + 1
        m = self.beta1 * state.m + (1.0 - self.beta1) * g
        v = self.beta2 * state.v + (1.0 - self.beta2) * g * g
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        decayed = arch.values * (1.0 - self.lr * self.weight_decay)
        values = decayed - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return arch.with_values(values), AdamState(m, v, t)


ArchOptimizer = Any  # PlainDescent | AdamW


def build_arch_optimizer(engine: EngineConfig) -> ArchOptimizer:
    if engine.arch_optimizer == ArchOptimizerKind.PLAIN:
        return PlainDescent(engine.eta_a)
    return AdamW(engine.adam_lr, engine.adam_weight_decay, tuple(engine.adam_betas), engine.adam_eps)
