"""Dense float64 array primitives used by the recurrent cells.

Tensors are plain ``numpy.ndarray`` objects in double precision.  The helpers
here add the shape checks and activation derivatives the cell code needs.
"""

from enum import Enum

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ActivationKind(Enum):
    SIGMOID = "sigmoid"
    TANH = "tanh"
    RELU = "relu"


def as_tensor(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def hadamard(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


def sigmoid(x):
    # Split by sign so exp never overflows.
    x = as_tensor(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def apply_activation(t, kind: ActivationKind) -> np.ndarray:
    t = as_tensor(t)
    if kind is ActivationKind.SIGMOID:
        return sigmoid(t)
    if kind is ActivationKind.TANH:
        return np.tanh(t)
    if kind is ActivationKind.RELU:
        return np.maximum(t, 0.0)
    raise ValueError(f"unknown activation {kind!r}")


def activation_grad(y, kind: ActivationKind) -> np.ndarray:
    """Derivative of the activation expressed through its output ``y``.

    ReLU uses 0 at the kink.
    """
    y = as_tensor(y)
    if kind is ActivationKind.SIGMOID:
        return y * (1.0 - y)
    if kind is ActivationKind.TANH:
        return 1.0 - y * y
    if kind is ActivationKind.RELU:
        return (y > 0).astype(np.float64)
    raise ValueError(f"unknown activation {kind!r}")


def glorot_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))
