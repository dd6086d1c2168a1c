"""Small dense linear-algebra layer shared by every other module.

Matrices are plain ``numpy.ndarray`` objects. The heavy lifting is delegated
to LAPACK through numpy/scipy; this module only adds input validation, a
deterministic sign convention for singular vectors, and error messages the
rest of the package relies on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised by :func:`cholesky_lower` on a non-positive pivot."""


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``M = U @ diag(sigma) @ V.T`` with ``r = min(rows, cols)``."""

    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def rank_max(self) -> int:
        return self.sigma.shape[0]

    def truncated(self, r: int) -> np.ndarray:
        """Rank-``r`` reconstruction from the leading components."""
        return (self.U[:, :r] * self.sigma[:r]) @ self.V[:, :r].T


def as_matrix(M, dtype=np.float64) -> np.ndarray:
    M = np.asarray(M, dtype=dtype)
    if M.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {M.shape}")
    return M


def svd(M) -> SvdResult:
    """Thin SVD with singular values in descending order.

    Each left singular vector is flipped so that its largest-magnitude entry
    is positive (first such entry on ties); the matching right vector is
    flipped with it, so the product is unchanged and results are reproducible.
    """
    M = as_matrix(M)
    if min(M.shape) < 1:
        raise ValueError("svd needs min(rows, cols) >= 1")
    if not np.all(np.isfinite(M)):
        raise ValueError("non-finite matrix")
    try:
        U, s, Vt = np.linalg.svd(M, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("svd did not converge") from exc
    V = Vt.T.copy()
    pivot = np.argmax(np.abs(U), axis=0)
    signs = np.where(U[pivot, np.arange(U.shape[1])] < 0, -1.0, 1.0)
    U = U * signs
    V = V * signs
    return SvdResult(U=U, sigma=s, V=V)


def cholesky_lower(P) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == P``."""
    P = as_matrix(P)
    if P.shape[0] != P.shape[1]:
        raise ValueError(f"cholesky needs a square matrix, got {P.shape}")
    scale = np.max(np.abs(P)) if P.size else 0.0
    if np.max(np.abs(P - P.T), initial=0.0) > 1e-9 * scale:
        raise ValueError("cholesky needs a symmetric matrix")
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("not positive definite") from exc


def solve_lower_triangular(L, B, transpose: bool = False) -> np.ndarray:
    """Solve ``L @ Y = B`` (or ``L.T @ Y = B`` when ``transpose``)."""
    L = as_matrix(L)
    B = np.asarray(B, dtype=np.float64)
    if np.any(np.diag(L) == 0.0):
        raise ValueError("singular triangular factor")
    if L.shape[0] != L.shape[1] or B.shape[0] != L.shape[0]:
        raise ValueError(f"incompatible shapes {L.shape} and {B.shape}")
    return solve_triangular(L, B, lower=True, trans="T" if transpose else "N", check_finite=False)


def frobenius(M) -> float:
    return float(np.linalg.norm(M))
