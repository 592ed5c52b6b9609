"""Joint covariance of coefficient estimates across interim analyses.

With groups accruing over time, the analyses at group counts n_1 < ... < n_M
produce estimates whose joint covariance has a closed scaling structure: the
bread and meat pieces of every analysis are, to first order, the final-
analysis pieces rescaled by the information fractions. One converged fit at
any single analysis therefore determines the whole M x M block covariance:

    Sigma[k, r] = (n / max(n_k, n_r)) * Sigma_m,

where Sigma_m is that fit's sandwich. The rescaled version
Gamma[k, r] = sqrt(min(n_k, n_r) / max(n_k, n_r)) * Sigma_m has unit-scale
diagonal blocks and the independent-increments cross correlation
sqrt(n_r / n_k) for r <= k. A direct estimator that recomputes every block
from complete data is provided for validation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import LongitudinalDataset
from .exceptions import ConfigError, ConvergenceError, DataError
from .gee import GeeFit, _mean_and_variance, correlation_matrix, expand_design
from .linalg import chol_inverse, symmetrize


@dataclass(frozen=True)
class InterimSchedule:
    """Planned cumulative group counts n_1 < ... < n_M."""

    counts: tuple[int, ...]

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "counts", counts)
        if len(counts) < 1:
            raise ConfigError("schedule needs at least one analysis")
        if counts[0] <= 0 or any(b <= a for a, b in zip(counts, counts[1:])):
            raise ConfigError(f"counts must be strictly increasing and positive: {counts}")

    @classmethod
    def from_fractions(cls, n_final: int, fractions) -> "InterimSchedule":
        fr = np.asarray(fractions, dtype=float)
        if fr.size < 1 or not np.isclose(fr[-1], 1.0):
            raise ConfigError("information fractions must end at 1")
        if (fr <= 0).any() or (np.diff(fr) <= 0).any():
            raise ConfigError("information fractions must be strictly increasing in (0, 1]")
        counts = np.rint(fr * n_final).astype(int)
        counts[-1] = int(n_final)
        return cls(tuple(int(c) for c in counts))

    @property
    def M(self) -> int:
        return len(self.counts)

    @property
    def n_final(self) -> int:
        return self.counts[-1]

    @property
    def fractions(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=float) / self.n_final


@dataclass(frozen=True)
class CompoundCovariance:
    """Block covariance of the stacked interim estimators.

    ``sigma`` holds the (M, M, p, p) blocks of the n-scaled covariance (the
    covariance of the stacked estimates is sigma / n); ``gamma`` the
    unit-diagonal rescaling. ``omega``/``lam`` keep the per-analysis bread and
    meat grids when the object came from a fit or the direct estimator.
    ``source_interim`` records which analysis the scaling was anchored at
    (None for the direct estimator or a pooled marginal).
    """

    schedule: InterimSchedule
    sigma: np.ndarray
    gamma: np.ndarray
    source_interim: int | None = None
    omega: np.ndarray | None = None
    lam: np.ndarray | None = None

    @property
    def M(self) -> int:
        return self.schedule.M

    @property
    def p(self) -> int:
        return self.sigma.shape[-1]

    def sigma_dense(self) -> np.ndarray:
        """Materialize the (M p, M p) matrix sigma (covariance times n)."""
        return symmetrize(np.block([[self.sigma[k, r] for r in range(self.M)]
                                    for k in range(self.M)]))

    def gamma_dense(self) -> np.ndarray:
        return symmetrize(np.block([[self.gamma[k, r] for r in range(self.M)]
                                    for k in range(self.M)]))

    def marginal(self, r: int) -> np.ndarray:
        """Covariance of the analysis-r estimate: sigma[r, r] / n."""
        if not 1 <= r <= self.M:
            raise ConfigError(f"analysis index {r} outside 1..{self.M}")
        return self.sigma[r - 1, r - 1] / self.schedule.n_final

    def to_dict(self) -> dict:
        out = {
            "schedule": list(self.schedule.counts),
            "source_interim": self.source_interim,
            "sigma_blocks": self.sigma.tolist(),
            "gamma_blocks": self.gamma.tolist(),
        }
        if self.omega is not None:
            out["omega_blocks"] = self.omega.tolist()
        if self.lam is not None:
            out["lambda_blocks"] = self.lam.tolist()
        return out

    @classmethod
    def from_marginal(
        cls,
        sigma_m: np.ndarray,
        schedule: InterimSchedule,
        source_interim: int | None = None,
    ) -> "CompoundCovariance":
        """Build the block structure around a single analysis covariance.

        ``sigma_m`` is the n_m-free sandwich (so the analysis-m estimate has
        covariance sigma_m / n_m); any positive semidefinite matrix works,
        e.g. a pooled covariance rescaled by its group count.
        """
        sigma_m = symmetrize(np.asarray(sigma_m, dtype=float))
        counts = np.asarray(schedule.counts, dtype=float)
        n = counts[-1]
        hi = np.maximum.outer(counts, counts)
        lo = np.minimum.outer(counts, counts)
        sigma = (n / hi)[:, :, None, None] * sigma_m
        gamma = np.sqrt(lo / hi)[:, :, None, None] * sigma_m
        return cls(schedule=schedule, sigma=sigma, gamma=gamma,
                   source_interim=source_interim)


def scale_blocks(fit: GeeFit, schedule: InterimSchedule) -> CompoundCovariance:
    """Compound covariance anchored at one converged fit.

    The fit's analysis index must match the schedule (its group count equals
    the scheduled count). Bread blocks scale by n_r / n, meat blocks by
    min(n_k, n_r) / n; the assembled sandwich blocks collapse to
    (n / max(n_k, n_r)) * Sigma_m, which is how they are computed so the
    diagonal identity sigma[r, r] / n == Sigma_m / n_r holds to rounding.
    """
    if not fit.converged:
        raise ConvergenceError("compound covariance requires a converged fit")
    m = fit.interim
    if not 1 <= m <= schedule.M:
        raise ConfigError(f"fit analysis {m} outside the schedule's 1..{schedule.M}")
    if schedule.counts[m - 1] != fit.n_groups:
        raise ConfigError(
            f"fit used {fit.n_groups} groups but the schedule plans "
            f"{schedule.counts[m - 1]} at analysis {m}"
        )
    counts = np.asarray(schedule.counts, dtype=float)
    n = counts[-1]
    cc = CompoundCovariance.from_marginal(fit.robust, schedule, source_interim=m)
    omega = (counts / n)[:, None, None] * fit.bread
    lam = (np.minimum.outer(counts, counts) / n)[:, :, None, None] * fit.meat
    return CompoundCovariance(
        schedule=schedule,
        sigma=cc.sigma,
        gamma=cc.gamma,
        source_interim=m,
        omega=omega,
        lam=lam,
    )


def marginal_covariance(cc: CompoundCovariance, r: int) -> np.ndarray:
    """Covariance of the analysis-r estimator implied by the block structure."""
    return cc.marginal(r)


def _group_quantities(dataset, fit, starts):
    """Per-group score and information at this fit's solution, all groups.

    Returns (scores (n, p), infos (n, p, p)) using the fit's association
    estimates and its coefficient value, evaluated on every complete group.
    """
    model = fit.model
    X = expand_design(model, dataset)
    y = dataset.outcome
    beta = fit.beta
    corr = fit.corr
    p = model.p
    n = starts.size - 1
    scores = np.zeros((n, p))
    infos = np.zeros((n, p, p))
    sizes = np.diff(starts)
    for s in np.unique(sizes):
        idx = np.flatnonzero(sizes == s)
        rows = (starts[idx][:, None] + np.arange(s)[None, :]).ravel()
        Xc = X[rows].reshape(idx.size, s, p)
        yc = y[rows].reshape(idx.size, s)
        eta = Xc @ beta
        mu, v = _mean_and_variance(eta, model.link)
        half = np.sqrt(v)
        r_std = (yc - mu) / half
        rinv = chol_inverse(correlation_matrix(corr.structure, corr.rho, int(s)),
                            name="working correlation")
        G = half[:, :, None] * Xc if model.link == "logit" else Xc
        scores[idx] = np.einsum("gsp,st,gt->gp", G, rinv, r_std) / corr.phi
        infos[idx] = np.einsum("gsp,st,gtq->gpq", G, rinv, G) / corr.phi
    return scores, infos


def direct_compound_estimate(
    dataset: LongitudinalDataset, fits: list[GeeFit]
) -> CompoundCovariance:
    """Estimate every block from complete data, without the scaling shortcut.

    Requires the full dataset (all rows observed) with membership for all M
    analyses and one converged fit per analysis. Bread for analysis m averages
    group information over the groups in by m; the (k, r) meat block averages
    cross products of the analysis-k and analysis-r group scores over the
    groups in by min(k, r). Intended for validating the scaled construction;
    cost grows with M^2.
    """
    if dataset.membership is None:
        raise DataError("direct estimator needs interim membership")
    M = dataset.n_interims
    if len(fits) != M:
        raise ConfigError(f"need one fit per analysis: got {len(fits)} for M={M}")
    if not dataset.observed.all():
        raise DataError("direct estimator requires fully observed data")
    for m, fit in enumerate(fits, start=1):
        if not fit.converged:
            raise ConvergenceError(f"fit at analysis {m} is not converged")
        if fit.interim != m:
            raise ConfigError(f"fits must be ordered by analysis; slot {m} holds {fit.interim}")
    counts = dataset.interim_counts()
    schedule = InterimSchedule(tuple(int(c) for c in counts))
    n = schedule.n_final
    p = fits[0].p
    starts = np.concatenate(
        ([0], 1 + np.flatnonzero(np.diff(dataset.group_id) != 0), [dataset.n_rows])
    )
    all_scores = np.zeros((M, dataset.n_groups, p))
    omega = np.zeros((M, p, p))
    xi = dataset.membership
    for m in range(M):
        scores, infos = _group_quantities(dataset, fits[m], starts)
        all_scores[m] = scores
        omega[m] = symmetrize(infos[xi[:, m]].sum(axis=0) / n)
    lam = np.zeros((M, M, p, p))
    for k in range(M):
        for r in range(k + 1):
            sel = xi[:, r]
            block = (all_scores[k][sel].T @ all_scores[r][sel]) / n
            lam[k, r] = block
            lam[r, k] = block.T
    omega_inv = np.stack([chol_inverse(omega[m], name="bread") for m in range(M)])
    sigma = np.einsum("kab,krbc,rdc->krad", omega_inv, lam, omega_inv)
    # unit-scale version: pre and post multiply by sqrt(n_m / n) per block
    root = np.sqrt(np.asarray(counts, dtype=float) / n)
    gamma = root[:, None, None, None] * sigma * root[None, :, None, None]
    return CompoundCovariance(
        schedule=schedule,
        sigma=sigma,
        gamma=gamma,
        source_interim=None,
        omega=omega,
        lam=lam,
    )
