"""Wald tests of restrictions h(beta) = gamma.

The statistic at analysis m is the quadratic form of h(beta_hat) - gamma in
the inverse of its delta-method covariance J C J' (C the covariance of
beta_hat, J the Jacobian of h). Linear contrasts A beta get an exact fast
path. A rank-deficient inner matrix raises instead of being pseudo-inverted:
redundant contrast rows should be fixed by the caller, not papered over.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import stats

from .exceptions import ConfigError, ConvergenceError, SingularMatrixError
from .gee import GeeFit
from .linalg import chol_solve, matrix_rank_sym, symmetrize

FD_REL_TOL = 1e-4


@dataclass(frozen=True)
class HypothesisSpec:
    """A restriction h(beta) = gamma with q rows.

    Build with :meth:`linear` (contrast matrix) or :meth:`general`
    (callables). General restrictions should supply an analytic Jacobian;
    without one a central finite-difference fallback is used and flagged in
    every result. Analytic Jacobians are checked against finite differences
    at first use.
    """

    q: int
    gamma: np.ndarray
    contrast: np.ndarray | None = None
    h_fn: Callable | None = None
    jac_fn: Callable | None = None
    fd_fallback: bool = False

    @staticmethod
    def linear(contrast, gamma=None) -> "HypothesisSpec":
        A = np.atleast_2d(np.asarray(contrast, dtype=float))
        q = A.shape[0]
        if np.linalg.matrix_rank(A) != q:
            raise ConfigError(f"contrast rows are linearly dependent (rank < {q})")
        g = np.zeros(q) if gamma is None else np.asarray(gamma, dtype=float).ravel()
        if g.shape != (q,):
            raise ConfigError(f"gamma must have {q} entries")
        return HypothesisSpec(q=q, gamma=g, contrast=A)

    @staticmethod
    def general(h, q: int, gamma=None, jacobian=None) -> "HypothesisSpec":
        g = np.zeros(q) if gamma is None else np.asarray(gamma, dtype=float).ravel()
        if g.shape != (q,):
            raise ConfigError(f"gamma must have {q} entries")
        return HypothesisSpec(
            q=q, gamma=g, h_fn=h, jac_fn=jacobian, fd_fallback=jacobian is None
        )

    @property
    def is_linear(self) -> bool:
        return self.contrast is not None

    def evaluate(self, beta: np.ndarray) -> np.ndarray:
        if self.is_linear:
            return self.contrast @ beta
        out = np.asarray(self.h_fn(beta), dtype=float).ravel()
        if out.shape != (self.q,):
            raise ConfigError(f"h returned {out.shape}, expected ({self.q},)")
        return out

    def _fd_jacobian(self, beta: np.ndarray) -> np.ndarray:
        J = np.empty((self.q, beta.size))
        for j in range(beta.size):
            step = 1e-6 * (1.0 + abs(beta[j]))
            up, dn = beta.copy(), beta.copy()
            up[j] += step
            dn[j] -= step
            J[:, j] = (self.evaluate(up) - self.evaluate(dn)) / (2.0 * step)
        return J

    def jacobian(self, beta: np.ndarray) -> np.ndarray:
        """Jacobian of h at beta, validated against finite differences."""
        if self.is_linear:
            return self.contrast
        if self.jac_fn is None:
            return self._fd_jacobian(beta)
        J = np.atleast_2d(np.asarray(self.jac_fn(beta), dtype=float))
        if J.shape != (self.q, beta.size):
            raise ConfigError(f"Jacobian shape {J.shape}, expected ({self.q}, {beta.size})")
        fd = self._fd_jacobian(beta)
        scale = np.maximum(np.abs(fd), 1.0)
        if np.max(np.abs(J - fd) / scale) > FD_REL_TOL:
            raise ConfigError(
                "analytic Jacobian disagrees with central finite differences "
                f"beyond relative {FD_REL_TOL:g} at the evaluation point"
            )
        return J


@dataclass(frozen=True)
class WaldResult:
    """One Wald test: statistic, degrees of freedom, reference regime.

    ``regime`` is ``chi_square`` (statistic is referred to chi2(df)) or
    ``f_test`` (statistic / df is referred to F(df, nu), used for pooled
    fits over few imputations). ``covariance`` is the delta-method covariance
    of h(beta_hat) actually inverted.
    """

    interim: int
    statistic: float
    df: int
    estimate: np.ndarray
    covariance: np.ndarray
    regime: str = "chi_square"
    nu: float | None = None
    fd_jacobian: bool = False


def contrast_rank(contrast, cov: np.ndarray, rel_tol: float = 1e-10) -> int:
    """Numerical rank of A C A' (eigenvalues below rel_tol * max are zero)."""
    A = np.atleast_2d(np.asarray(contrast, dtype=float))
    return matrix_rank_sym(A @ symmetrize(cov) @ A.T, rel_tol=rel_tol)


def _wald_core(beta, cov_beta, hyp: HypothesisSpec, interim: int) -> WaldResult:
    beta = np.asarray(beta, dtype=float)
    d = hyp.evaluate(beta) - hyp.gamma
    J = hyp.jacobian(beta)
    inner = symmetrize(J @ symmetrize(cov_beta) @ J.T)
    rank = matrix_rank_sym(inner)
    if rank < hyp.q:
        raise SingularMatrixError(
            f"inner matrix of the Wald statistic has rank {rank} < {hyp.q}; "
            "remove redundant restrictions or check the covariance",
            rank=rank,
        )
    stat = float(d @ chol_solve(inner, d, name="Wald inner matrix"))
    return WaldResult(
        interim=interim,
        statistic=stat,
        df=hyp.q,
        estimate=hyp.evaluate(beta),
        covariance=inner,
        fd_jacobian=hyp.fd_fallback,
    )


def wald_statistic(fit: GeeFit, hyp: HypothesisSpec) -> WaldResult:
    """Wald statistic for h(beta) = gamma at this fit, using the sandwich."""
    if not fit.converged:
        raise ConvergenceError("Wald test requires a converged fit")
    return _wald_core(fit.beta, fit.cov, hyp, interim=fit.interim)


def reference_pvalue(result: WaldResult) -> float:
    """Upper tail probability under the result's reference distribution."""
    if result.regime == "chi_square":
        return float(stats.chi2.sf(result.statistic, result.df))
    if result.regime == "f_test":
        if result.nu is None or result.nu <= 0:
            raise ConfigError("f_test regime needs positive denominator df")
        return float(stats.f.sf(result.statistic / result.df, result.df, result.nu))
    raise ConfigError(f"unknown regime {result.regime!r}")


# contrasts for the two built-in trial models


def interaction_scalar_contrast(p: int = 5) -> HypothesisSpec:
    """Scalar restriction on the treatment-by-time slope (coefficient 4 of 5)."""
    if p != 5:
        raise ConfigError("the scalar interaction contrast is defined for p = 5")
    row = np.zeros((1, 5))
    row[0, 3] = 1.0
    return HypothesisSpec.linear(row)


def discrete_interaction_joint_contrast(p: int = 11) -> HypothesisSpec:
    """Joint restriction on the four treatment-by-visit interactions."""
    if p != 11:
        raise ConfigError("the joint interaction contrast is defined for p = 11")
    A = np.zeros((4, 11))
    A[:, 7:] = np.eye(4)
    return HypothesisSpec.linear(A)


BUILTIN_HYPOTHESES = {
    "interaction_scalar": interaction_scalar_contrast,
    "discrete_interaction_joint": discrete_interaction_joint_contrast,
}


def builtin_hypothesis(name: str) -> HypothesisSpec:
    try:
        return BUILTIN_HYPOTHESES[name]()
    except KeyError:
        raise ConfigError(
            f"unknown hypothesis {name!r}; built-ins: {sorted(BUILTIN_HYPOTHESES)}"
        )
