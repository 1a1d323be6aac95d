"""Dense double-precision matrix arithmetic used throughout the package.

Matrices are plain 2-D ``numpy.ndarray`` objects in float64. Every public
operation validates shapes up front and guarantees finite entries in its
result, so downstream modules can treat NaN/Inf as impossible.
"""
from __future__ import annotations

import numpy as np

from .errors import NumericalError, ShapeError

DEFAULT_PINV_TOL = 1e-10


def as_matrix(values) -> np.ndarray:
    """Coerce ``values`` to a finite 2-D float64 array.

    Raises ShapeError if the input is not two-dimensional or empty, and
    NumericalError if it contains NaN/Inf.
    """
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    if a.size == 0:
        raise ShapeError(f"matrix must be nonempty, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("matrix contains non-finite entries")
    return a


def _require_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} x {b.shape} do not match")
    return a @ b


def pseudoinverse(a: np.ndarray, tol: float = DEFAULT_PINV_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD.

    Singular values at or below ``tol`` times the largest singular value are
    treated as zero. The result satisfies the four Penrose conditions to
    numerical accuracy.
    """
    a = as_matrix(a)
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    u, s, vt = _svd(a)
    cutoff = tol * s[0] if s.size else 0.0
    inv = np.where(s > cutoff, 1.0 / np.where(s > cutoff, s, 1.0), 0.0)
    return (vt.T * inv) @ u.T


def rank(a: np.ndarray, tol: float = DEFAULT_PINV_TOL) -> int:
    """Number of singular values above ``tol`` times the largest one."""
    a = as_matrix(a)
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    s = _svd(a)[1]
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > tol * s[0]))


def _svd(a: np.ndarray):
    try:
        return np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"SVD did not converge for a {a.shape[0]}x{a.shape[1]} matrix"
        ) from exc


def frobenius_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(as_matrix(a)))


def elementwise_abs(a: np.ndarray) -> np.ndarray:
    return np.abs(as_matrix(a))


def elementwise_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    _require_same_shape(a, b, "elementwise_mul")
    return a * b


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    _require_same_shape(a, b, "add")
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    _require_same_shape(a, b, "sub")
    return a - b


def scale(a: np.ndarray, factor: float) -> np.ndarray:
    if not np.isfinite(factor):
        raise NumericalError(f"scale factor must be finite, got {factor}")
    return as_matrix(a) * float(factor)
