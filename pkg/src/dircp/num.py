"""Small numeric helpers shared across modules."""

from __future__ import annotations

import numpy as np


def sigmoid(x: np.ndarray | float) -> np.ndarray | float:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def sigmoid_grad_from_value(y: np.ndarray) -> np.ndarray:
    """d sigmoid/dx expressed through the output value y = sigmoid(x)."""
    return y * (1.0 - y)


def canonical_sum(x: np.ndarray, axis: int) -> np.ndarray:
    """Sum along an axis in a value-canonical order.

    Sorting before summing makes the float result independent of the input
    ordering along that axis, which keeps agent-permutation tests bit-exact.
    """
    return np.sum(np.sort(x, axis=axis), axis=axis)
