"""Dense linear-algebra helpers with a strict no-pseudoinverse policy.

Every inverse in the package goes through a Cholesky factorization. When a
matrix that should be positive definite is not, we raise instead of silently
falling back to a pseudo-inverse: a rank deficiency here almost always means
a collinear design or a degenerate hypothesis, and masking it produces
plausible-looking but wrong statistics.
"""
from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .exceptions import SingularMatrixError


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Average a square (or stacked square) array with its transpose."""
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def matrix_rank_sym(a: np.ndarray, rel_tol: float = 1e-10) -> int:
    """Numerical rank of a symmetric PSD matrix via its eigenvalues.

    Eigenvalues below ``rel_tol`` times the largest one count as zero.
    """
    a = symmetrize(np.asarray(a, dtype=float))
    w = np.linalg.eigvalsh(a)
    top = float(np.max(np.abs(w))) if w.size else 0.0
    if top == 0.0:
        return 0
    return int(np.sum(w > rel_tol * top))


def cholesky_factor(a: np.ndarray, name: str = "matrix"):
    """Cholesky factor of a symmetric positive definite matrix.

    Raises SingularMatrixError (with the numerical rank attached) when the
    factorization fails.
    """
    a = symmetrize(np.asarray(a, dtype=float))
    try:
        return cho_factor(a, lower=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - scipy raises below
        raise SingularMatrixError(
            f"{name} is not positive definite (rank {matrix_rank_sym(a)} of {a.shape[0]})"
        ) from exc
    except Exception as exc:
        raise SingularMatrixError(
            f"{name} is not positive definite (rank {matrix_rank_sym(a)} of {a.shape[0]})",
            rank=matrix_rank_sym(a),
        ) from exc


def chol_solve(a: np.ndarray, b: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Solve ``a x = b`` for symmetric positive definite ``a``."""
    return cho_solve(cholesky_factor(a, name=name), b)


def chol_inverse(a: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Exact inverse of a symmetric positive definite matrix."""
    n = a.shape[0]
    inv = cho_solve(cholesky_factor(a, name=name), np.eye(n))
    return symmetrize(inv)


def sampling_cholesky(cov: np.ndarray, name: str = "covariance") -> np.ndarray:
    """Lower Cholesky factor for Monte Carlo sampling, with a jitter ladder.

    A covariance assembled from scaled blocks can be PSD up to rounding. We
    first try the plain factorization, then add ``eps * trace/dim`` to the
    diagonal with eps escalating from 1e-12 by factors of 10 up to 1e-6.
    Anything still failing at that point is treated as genuinely singular.
    """
    cov = symmetrize(np.asarray(cov, dtype=float))
    dim = cov.shape[0]
    scale = float(np.trace(cov)) / dim if dim else 0.0
    eps = 0.0
    while True:
        try:
            return np.linalg.cholesky(cov + eps * np.eye(dim))
        except np.linalg.LinAlgError:
            if scale <= 0.0:
                raise SingularMatrixError(
                    f"{name} has nonpositive trace; cannot sample from it",
                    rank=matrix_rank_sym(cov),
                )
            if eps == 0.0:
                eps = 1e-12 * scale
            elif eps < 1e-6 * scale:
                eps = min(eps * 10.0, 1e-6 * scale)
            else:
                raise SingularMatrixError(
                    f"{name} is singular even after diagonal jitter up to "
                    f"1e-6 * trace/dim (rank {matrix_rank_sym(cov)} of {dim})",
                    rank=matrix_rank_sym(cov),
                )
