"""Dense float64 matrix primitives, seeded RNG streams, and a ridge-stabilized
weighted least-squares solver.

All operations are pure and operate on ``numpy.ndarray`` values in float64.
Shape checking is explicit so callers get a ``ShapeError`` instead of a silent
broadcast.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, SingularSystemError


def as_matrix(values) -> np.ndarray:
    """Coerce to a 2-D float64 array, rejecting non-finite entries."""
    m = np.asarray(values, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul requires 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a * b


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax_axis(m: np.ndarray, axis: str) -> np.ndarray:
    """Softmax along ``axis`` ("rows": each row sums to 1, "cols": each column
    sums to 1), stabilized by max subtraction."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError("softmax_axis requires a 2-D matrix")
    if axis == "rows":
        ax = 1
    elif axis == "cols":
        ax = 0
    else:
        raise ValueError(f"axis must be 'rows' or 'cols', got {axis!r}")
    shifted = m - np.max(m, axis=ax, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=ax, keepdims=True)


def weighted_least_squares(
    design: np.ndarray,
    targets: Sequence[float],
    weights: Sequence[float],
    ridge: float = 0.0,
    intercept: bool = False,
) -> np.ndarray:
    """Solve argmin_c sum_k w_k (y_k - X_k . c)^2 + ridge * ||c||^2 via the
    normal equations.

    With ``intercept=True`` the first design column is treated as the
    intercept and excluded from the ridge penalty.
    """
    X = as_matrix(design)
    y = np.asarray(targets, dtype=np.float64).ravel()
    w = np.asarray(weights, dtype=np.float64).ravel()
    if X.shape[0] != y.shape[0] or X.shape[0] != w.shape[0]:
        raise ShapeError(
            f"rows={X.shape[0]}, targets={y.shape[0]}, weights={w.shape[0]} must agree"
        )
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")

    Xw = X * w[:, None]
    A = X.T @ Xw
    b = Xw.T @ y
    penalty = np.full(X.shape[1], ridge)
    if intercept and X.shape[1] > 0:
        penalty[0] = 0.0
    A = A + np.diag(penalty)
    if ridge == 0.0 and np.linalg.matrix_rank(A) < A.shape[0]:
        raise SingularSystemError(
            "normal equations are singular; pass ridge > 0 to stabilize"
        )
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            "normal equations are singular; pass ridge > 0 to stabilize"
        ) from exc


def finite_diff_grad(
    f: Callable[[np.ndarray], float], p: np.ndarray, h: float
) -> np.ndarray:
    """Central-difference gradient of a scalar function, used as the training
    oracle for backpropagation checks."""
    if h <= 0:
        raise ValueError("h must be positive")
    p = np.asarray(p, dtype=np.float64)
    g = np.zeros_like(p)
    for j in range(p.size):
        e = np.zeros_like(p)
        e.flat[j] = h
        g.flat[j] = (f(p + e) - f(p - e)) / (2.0 * h)
    return g


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream keyed by a 64-bit seed plus a substream path.

    Backed by numpy's Philox counter-based generator: identical (seed, path)
    yields identical draws on every platform. ``child`` derives independent
    substreams without consuming state from the parent.
    """

    seed: int
    path: tuple[int, ...] = ()

    def child(self, *indices: int) -> "RngStream":
        return RngStream(self.seed, self.path + indices)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))
