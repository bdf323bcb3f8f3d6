"""Dense float64 helpers shared by the model, losses and metrics.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 and rank 2.
"""

from __future__ import annotations

import numpy as np


class ContractError(ValueError):
    """Raised when an argument violates a shape or range precondition."""


def as_matrix(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ContractError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator seeded through SeedSequence.

    PCG64 streams are fixed by the algorithm, so a seed gives the same draws on
    every platform.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def matmul(a, b, exact: bool = False) -> np.ndarray:
    """Matrix product ``a @ b``.

    With ``exact=True`` the inner dimension is accumulated strictly left to
    right with separate multiply and add, which is bit-identical to the naive
    triple loop. The default path defers to BLAS.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if not exact:
        return a @ b
    out = np.zeros((a.shape[0], b.shape[1]))
    for p in range(a.shape[1]):
        out += a[:, p : p + 1] * b[p : p + 1, :]
    return out


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_grad(x) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return (np.asarray(x, dtype=np.float64) > 0).astype(np.float64)


def log_softmax_rows(x) -> np.ndarray:
    x = as_matrix(x)
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def argmax_row(x) -> int:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ContractError("argmax of an empty row")
    # numpy returns the first occurrence, i.e. the lowest index among ties
    return int(np.argmax(x))


def argmin_row(x) -> int:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ContractError("argmin of an empty row")
    return int(np.argmin(x))


def sq_euclidean(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractError(f"length mismatch: {a.size} vs {b.size}")
    d = a - b
    return float(np.dot(d, d))


def pairwise_sq_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """(N, C) matrix of squared distances, computed by direct differences.

    The expanded ``|a|^2 - 2ab + |b|^2`` form is avoided on purpose: it loses
    the exact-zero distance when a point coincides with a center.
    """
    points = as_matrix(points, "points")
    centers = as_matrix(centers, "centers")
    if points.shape[1] != centers.shape[1]:
        raise ContractError(f"width mismatch: points {points.shape}, centers {centers.shape}")
    out = np.empty((points.shape[0], centers.shape[0]))
    for c in range(centers.shape[0]):
        d = points - centers[c]
        out[:, c] = np.einsum("ij,ij->i", d, d)
    return out
