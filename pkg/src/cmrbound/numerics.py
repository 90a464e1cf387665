"""Small dense-matrix kernels used throughout the package."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, NumericalFailure

DEFAULT_REL_TOL = 1e-12


def as_matrix(M) -> np.ndarray:
    A = np.atleast_2d(np.asarray(M, dtype=float))
    if A.ndim != 2:
        raise ContractViolation(f"expected a 2-d matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ContractViolation("matrix has non-finite entries")
    return A


def sym(A: np.ndarray) -> np.ndarray:
    """Symmetrize the last two axes."""
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def pinv(M, rel_tol: float = DEFAULT_REL_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse via SVD.

    Singular values below ``rel_tol * sigma_max`` are treated as zero.
    """
    if rel_tol <= 0:
        raise ContractViolation("rel_tol must be positive")
    A = as_matrix(M)
    try:
        return np.linalg.pinv(A, rcond=rel_tol)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD failed for {A.shape[0]}x{A.shape[1]} matrix: {exc}") from exc


def pinv_stack(M: np.ndarray, rel_tol: float = DEFAULT_REL_TOL) -> np.ndarray:
    """Pseudoinverse of each matrix in a stack of shape (n, r, c)."""
    M = np.asarray(M, dtype=float)
    if M.shape[0] == 0:
        return np.swapaxes(M, -1, -2).copy()
    try:
        return np.linalg.pinv(M, rcond=rel_tol)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure(f"SVD failed for stack of shape {M.shape}: {exc}") from exc


def min_eig(A) -> float:
    return float(np.linalg.eigvalsh(sym(as_matrix(A)))[0])


def loewner_geq(A, B, eig_tol: float = 1e-10) -> bool:
    """True iff ``A - B`` is positive semidefinite up to ``eig_tol``."""
    A = as_matrix(A)
    B = as_matrix(B)
    if A.shape != B.shape or A.shape[0] != A.shape[1]:
        raise ContractViolation(f"shape mismatch: {A.shape} vs {B.shape}")
    return min_eig(A - B) >= -eig_tol


def default_step(theta: np.ndarray) -> np.ndarray:
    return 1e-6 * (1.0 + np.abs(theta))


def fd_derivative(
    f: Callable[[np.ndarray], np.ndarray],
    at: Sequence[float],
    step: float | Sequence[float] | None = None,
) -> list[np.ndarray]:
    """Central-difference derivative of ``f`` with respect to each coordinate of ``at``.

    Returns one array (same shape as ``f(at)``) per coordinate.
    """
    theta = np.asarray(at, dtype=float).ravel()
    if step is None:
        h = default_step(theta)
    else:
        h = np.broadcast_to(np.asarray(step, dtype=float), theta.shape)
    if np.any(h <= 0):
        raise ContractViolation("step must be positive")
    out = []
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h[i]
        hi = np.asarray(f(theta + e), dtype=float)
        lo = np.asarray(f(theta - e), dtype=float)
        out.append((hi - lo) / (2.0 * h[i]))
    return out
