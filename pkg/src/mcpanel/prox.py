"""Proximal operators and the thin-SVD contract used by the solver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Singular values at or below RANK_RTOL * sigma_max count as zero.
RANK_RTOL = 1e-12


class SvdConvergenceError(np.linalg.LinAlgError):
    """Raised when the dense SVD routine fails to converge."""

    def __init__(self, shape):
        self.shape = tuple(shape)
        super().__init__(f"SVD did not converge for a {shape[0]}x{shape[1]} matrix")


@dataclass(frozen=True)
class SvdFactors:
    """Thin singular value decomposition ``U diag(s) V^T``.

    Attributes
    ----------
    left_vectors : ndarray, shape (N, r)
    singular_values : ndarray, shape (r,)
        Nonincreasing and nonnegative.
    right_vectors : ndarray, shape (T, r)
    """

    left_vectors: np.ndarray
    singular_values: np.ndarray
    right_vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.left_vectors * self.singular_values) @ self.right_vectors.T

    def rank(self, atol: float = 0.0) -> int:
        return numerical_rank(self.singular_values, atol=atol)


def thin_svd(matrix: np.ndarray) -> SvdFactors:
    """Thin SVD with ``r = min(N, T)``."""
    a = np.asarray(matrix, dtype=float)
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdConvergenceError(a.shape) from exc
    return SvdFactors(u, s, vt.T)


def numerical_rank(singular_values: np.ndarray, atol: float = 0.0) -> int:
    """Count singular values above ``max(RANK_RTOL * sigma_max, atol)``."""
    s = np.asarray(singular_values, dtype=float)
    if s.size == 0:
        return 0
    smax = float(s.max())
    if smax <= atol or smax == 0.0:
        return 0
    return int(np.count_nonzero(s > max(RANK_RTOL * smax, atol)))


def soft_threshold(x, threshold):
    """``sign(x) * max(|x| - threshold, 0)``; works element-wise on arrays."""
    if np.any(np.asarray(threshold) < 0):
        raise ValueError("threshold must be nonnegative")
    out = np.sign(x) * np.maximum(np.abs(x) - threshold, 0.0)
    if np.ndim(out) == 0:
        return float(out)
    return out


def svt_factors(matrix: np.ndarray, threshold: float) -> SvdFactors:
    """Singular value thresholding, returning the shrunken factors."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    f = thin_svd(matrix)
    return SvdFactors(
        f.left_vectors,
        np.maximum(f.singular_values - threshold, 0.0),
        f.right_vectors,
    )


def svt(matrix: np.ndarray, threshold: float) -> np.ndarray:
    """Proximal operator of ``threshold * ||.||_*``.

    Returns ``U diag(max(s - threshold, 0)) V^T`` for the thin SVD of
    `matrix`, i.e. the minimizer of ``0.5 ||A - B||_F^2 + threshold ||B||_*``.
    """
    return svt_factors(matrix, threshold).reconstruct()


def hard_rank_projection(matrix: np.ndarray, rank: int) -> SvdFactors:
    """Best rank-`rank` approximation (no shrinkage of the kept values)."""
    f = thin_svd(matrix)
    s = f.singular_values.copy()
    s[rank:] = 0.0
    return SvdFactors(f.left_vectors, s, f.right_vectors)


def nuclear_norm(matrix: np.ndarray) -> float:
    return float(np.linalg.svd(np.asarray(matrix, dtype=float), compute_uv=False).sum())
