"""Input checking helpers and the package exception types."""

from __future__ import annotations

import numpy as np


class NumericError(ArithmeticError):
    """A computation produced a non-finite value or a singular system."""

    def __init__(self, message, step=None, task=None):
        super().__init__(message)
        self.step = step
        self.task = task


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


def as_float_vector(x, dim=None, name="vector") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ValueError(f"{name} has length {arr.shape[0]}, expected {dim}")
    return arr


def check_same_dim(*arrays, names=None):
    dims = {a.shape for a in arrays}
    if len(dims) != 1:
        label = ", ".join(names) if names else "arguments"
        raise ValueError(f"dimension mismatch between {label}: {[a.shape for a in arrays]}")


def check_finite(arr, what="value", step=None):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite {what}" + (f" at step {step}" if step is not None else ""), step=step)
