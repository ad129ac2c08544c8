"""Error types raised by the engine."""

from typing import Any, Dict, List, Optional, Tuple


class SGLError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SGLError, ValueError):
    """Operand shapes or widths do not conform."""

    def __init__(self, operation: str, left: Tuple[int, ...], right: Optional[Tuple[int, ...]] = None):
        self.operation = operation
        self.left = tuple(left)
        self.right = None if right is None else tuple(right)
        if right is None:
            message = f"{operation}: invalid shape {self.left}"
        else:
            message = f"{operation}: incompatible shapes {self.left} and {self.right}"
        super().__init__(message)


class ConfigError(SGLError, ValueError):
    """Invalid experiment configuration."""

    def __init__(self, message: str, fields: Optional[List[str]] = None):
        self.fields = fields or []
        if self.fields:
            message = message + "\n" + "\n".join(f"  - {field}" for field in self.fields)
        super().__init__(message)


class DatasetError(SGLError, ValueError):
    """Malformed dataset, CSV file or label."""


class NonFiniteGradientError(SGLError, ArithmeticError):
    """A gradient contained NaN or infinite entries."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        self.diagnostics = diagnostics or {}
        details = " ".join(f"{key}={value}" for key, value in self.diagnostics.items())
        super().__init__(f"{message} {details}".strip())


class CheckpointError(SGLError):
    """Checkpoint file is unreadable or belongs to another configuration."""


class OracleBudgetError(SGLError):
    """Gradient-check instance is too large for the numerical oracle."""
