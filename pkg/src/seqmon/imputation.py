"""Chained-equation imputation and combination of repeated-imputation fits.

The dataset is pivoted onto its visit grid, one variable per (column,
visit) pair, so a group's observed outcomes at other visits predict its
missing ones. This conditioning is what keeps the pooled covariance honest:
imputing each row from covariates alone ignores the within-group dependence,
inflates both the completed-data sandwiches and the between-imputation
spread, and makes the downstream tests conservative. Each sweep regresses
every gappy variable on all the others over its originally observed groups,
perturbs the parameters by a draw from their estimated sampling distribution
(proper imputation), and redraws the gaps from the resulting predictive
model. Fits on the completed datasets are combined by the usual
repeated-imputation rules: within-imputation covariance plus (1 + 1/L)
times the between-imputation spread.
"""
from __future__ import annotations

from dataclasses import dataclass, replace as dc_replace
from typing import Mapping

import numpy as np
from scipy import stats
from scipy.special import expit

from .datasets import LongitudinalDataset
from .exceptions import ConfigError, ConvergenceError, DataError, NumericalError
from .gee import GeeFit, ModelSpec, WorkingCorrelation, fit_gee
from .hypotheses import HypothesisSpec, WaldResult, _wald_core
from .linalg import chol_inverse, chol_solve, sampling_cholesky, symmetrize
from .rng import substream
from .seqcov import CompoundCovariance, InterimSchedule

METHODS = ("normal_regression", "logistic_regression", "none")

CHI_SQUARE_MIN_IMPUTATIONS = 30

OUTCOME = "outcome"


@dataclass(frozen=True)
class ImputationConfig:
    """Settings for one chained-equations run.

    ``methods`` maps column names (the reserved name ``outcome`` or any
    covariate) to their conditional models. Columns with gaps and no method
    are refused. ``sweeps`` is the number of full passes over the gappy
    columns; ``max_retries`` bounds how often a degenerate imputation is
    regenerated with an advanced substream before giving up. ``seed_key``
    prefixes the per-imputation substreams, as in BoundaryConfig.
    """

    count: int
    methods: Mapping[str, str]
    seed: int = 0
    sweeps: int = 10
    max_retries: int = 10
    seed_key: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "seed_key", tuple(int(k) for k in self.seed_key))
        if self.count < 2:
            raise ConfigError("need at least two imputations to pool")
        for col, method in self.methods.items():
            if method not in METHODS:
                raise ConfigError(
                    f"unknown imputation method {method!r} for column {col!r}; "
                    f"choose from {METHODS}"
                )
        if self.sweeps < 1:
            raise ConfigError("sweeps must be positive")


@dataclass(frozen=True)
class PooledFit:
    """Combined estimate over L imputed-data fits.

    ``within`` averages the per-fit coefficient covariances, ``between`` is
    the sample covariance of the coefficient estimates, and ``total`` is
    within + (1 + 1/L) between: the covariance of ``beta``. ``nu`` holds the
    componentwise small-sample denominator degrees of freedom.
    """

    beta: np.ndarray
    within: np.ndarray
    between: np.ndarray
    total: np.ndarray
    count: int
    interim: int
    n_groups: int
    nu: np.ndarray
    replaced: int = 0

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    @property
    def nu_min(self) -> float:
        return float(np.min(self.nu))


# -- column models -----------------------------------------------------------


def _draw_normal_regression(X_obs, y_obs, X_mis, rng):
    """Proper draw for a continuous column: perturbed OLS plus noise."""
    n_obs, q = X_obs.shape
    if n_obs <= q:
        raise NumericalError(f"{n_obs} observed rows cannot fit {q} regressors")
    xtx = X_obs.T @ X_obs
    beta_hat = chol_solve(xtx, X_obs.T @ y_obs, name="imputation regression")
    resid = y_obs - X_obs @ beta_hat
    dof = n_obs - q
    rss = float(resid @ resid)
    if rss <= 0:
        raise NumericalError("degenerate conditional fit: zero residual variance")
    sigma2 = rss / rng.chisquare(dof)
    cov_factor = sampling_cholesky(
        chol_inverse(xtx, name="imputation regression"), name="imputation regression draw"
    )
    beta_star = beta_hat + np.sqrt(sigma2) * (cov_factor @ rng.standard_normal(q))
    return X_mis @ beta_star + np.sqrt(sigma2) * rng.standard_normal(X_mis.shape[0])


def _logistic_mle(X, y, max_iter=50, tol=1e-10):
    """Plain Newton logistic fit; returns (beta, covariance)."""
    n, q = X.shape
    if n <= q:
        raise NumericalError(f"{n} observed rows cannot fit {q} regressors")
    beta = np.zeros(q)
    for _ in range(max_iter):
        eta = X @ beta
        if np.max(np.abs(eta)) > 200.0:
            raise NumericalError("conditional logistic fit diverged (separation?)")
        mu = expit(eta)
        w = mu * (1.0 - mu)
        grad = X.T @ (y - mu)
        hess = (X * w[:, None]).T @ X
        step = chol_solve(hess, grad, name="conditional logistic information")
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            break
    else:
        raise ConvergenceError("conditional logistic fit did not converge")
    eta = X @ beta
    mu = expit(eta)
    hess = (X * (mu * (1.0 - mu))[:, None]).T @ X
    return beta, chol_inverse(hess, name="conditional logistic information")


def _draw_logistic_regression(X_obs, y_obs, X_mis, rng):
    """Proper draw for a binary column: perturbed MLE, then Bernoulli draws."""
    uniq = np.unique(y_obs)
    if not np.isin(uniq, (0.0, 1.0)).all() or uniq.size < 2:
        raise NumericalError(
            "degenerate conditional fit: binary column needs both 0 and 1 observed"
        )
    beta_hat, cov = _logistic_mle(X_obs, y_obs)
    factor = sampling_cholesky(cov, name="conditional logistic draw")
    beta_star = beta_hat + factor @ rng.standard_normal(beta_hat.size)
    pr = expit(X_mis @ beta_star)
    return (rng.random(X_mis.shape[0]) < pr).astype(float)


_DRAWERS = {
    "normal_regression": _draw_normal_regression,
    "logistic_regression": _draw_logistic_regression,
}


# -- chained equations -------------------------------------------------------


def _column_table(dataset: LongitudinalDataset) -> dict[str, np.ndarray]:
    """Imputable value columns in declared order: outcome first, then covariates."""
    table = {OUTCOME: dataset.outcome.copy()}
    for j, name in enumerate(dataset.covariate_names):
        if name == OUTCOME:
            raise DataError("covariate name 'outcome' collides with the outcome column")
        table[name] = dataset.covariates[:, j].copy()
    return table


def _imputation_plan(dataset: LongitudinalDataset, cfg: ImputationConfig):
    """Columns to visit (declared order) and their original gap masks."""
    table = _column_table(dataset)
    plan = []
    for name, values in table.items():
        gaps = np.isnan(values)
        if not gaps.any():
            continue
        method = cfg.methods.get(name, "none")
        if method == "none":
            raise DataError(
                f"column {name!r} has {int(gaps.sum())} gaps but no imputation method"
            )
        if gaps.all():
            raise DataError(f"column {name!r} has no observed values to learn from")
        plan.append((name, method, gaps))
    if plan and np.isnan(dataset.obs_time).any():
        raise DataError("observation times must be complete to pivot onto the visit grid")
    return table, plan


def _visit_slots(dataset: LongitudinalDataset) -> tuple[np.ndarray, np.ndarray]:
    """Visit grid (sorted distinct observation times) and each row's slot on it."""
    grid = np.unique(dataset.obs_time)
    slots = np.searchsorted(grid, dataset.obs_time)
    cells = dataset.group_id.astype(np.int64) * grid.size + slots
    if np.unique(cells).size != cells.size:
        raise DataError("a group has two rows at the same observation time; cannot pivot by visit")
    return grid, slots


def _group_profile(dataset: LongitudinalDataset, values: np.ndarray) -> np.ndarray | None:
    """Per-group value when the column is constant within groups, else None."""
    obs = ~np.isnan(values)
    if not obs.any():
        return None
    gid = dataset.group_id[obs]
    vec = np.full(dataset.n_groups, np.nan)
    vec[gid] = values[obs]
    if np.array_equal(vec[gid], values[obs]):
        return vec
    return None


def _informative_predictors(X: np.ndarray) -> np.ndarray:
    """Drop constant and exactly duplicated predictor columns; keep the intercept."""
    keep = [0]
    kept = [X[:, 0]]
    for j in range(1, X.shape[1]):
        col = X[:, j]
        if np.ptp(col) == 0.0 or any(np.array_equal(col, c) for c in kept):
            continue
        keep.append(j)
        kept.append(col)
    return X[:, keep]


def _impute_once(dataset: LongitudinalDataset, cfg: ImputationConfig, rng) -> LongitudinalDataset:
    """One completed copy of the dataset.

    The chained equations run on the (group x visit) pivot: a gappy column is
    one target per visit slot, or a single group-level target when the data
    show it constant within groups, and each conditional model sees the
    group's values at every other visit. Pivot cells no row occupies are
    latent helpers: filled so they can serve as predictors, never written
    back. Targets with too few originally observed values fall back to
    pooled redraws from the column's observed values.
    """
    table, plan = _imputation_plan(dataset, cfg)
    if not plan:
        return dataset.copy()
    _grid, slots = _visit_slots(dataset)
    n = dataset.n_groups
    rows = (dataset.group_id, slots)
    reps: dict[str, np.ndarray] = {}
    holes: dict[str, np.ndarray] = {}
    pools: dict[str, np.ndarray] = {}
    for name, values in table.items():
        profile = _group_profile(dataset, values)
        if profile is not None:
            rep = profile[:, None]
        else:
            rep = np.full((n, _grid.size), np.nan)
            rep[rows] = values
        mask = np.isnan(rep)
        pool = values[~np.isnan(values)]
        if mask.any():
            if pool.size == 0:
                raise DataError(f"column {name!r} has no observed values to learn from")
            rep[mask] = rng.choice(pool, size=int(mask.sum()), replace=True)
        reps[name], holes[name], pools[name] = rep, mask, pool
    names = list(table.keys())
    for _sweep in range(cfg.sweeps):
        for name, method, _gaps in plan:
            rep = reps[name]
            for k in range(rep.shape[1]):
                holes_k = holes[name][:, k]
                if not holes_k.any():
                    continue
                parts = [np.ones((n, 1))]
                for other in names:
                    block = reps[other]
                    parts.append(np.delete(block, k, axis=1) if other == name else block)
                X = _informative_predictors(np.hstack(parts))
                seen = ~holes_k
                y_obs = rep[seen, k]
                enough = int(seen.sum()) > X.shape[1] + 2
                if enough and method == "logistic_regression":
                    enough = np.unique(y_obs).size > 1
                if enough and method == "normal_regression":
                    enough = np.ptp(y_obs) > 0.0
                if enough:
                    try:
                        rep[holes_k, k] = _DRAWERS[method](X[seen], y_obs, X[holes_k], rng)
                        continue
                    except NumericalError:
                        # separated or singular conditional fit on a thin slot
                        pass
                rep[holes_k, k] = rng.choice(
                    pools[name], size=int(holes_k.sum()), replace=True
                )
    completed = {}
    for name, _method, _gaps in plan:
        rep = reps[name]
        completed[name] = rep[:, 0][dataset.group_id] if rep.shape[1] == 1 else rep[rows]
    out = dataset.copy()
    if OUTCOME in completed:
        out.outcome = completed[OUTCOME]
    if dataset.covariate_names:
        out.covariates = np.column_stack(
            [
                completed.get(name, dataset.covariates[:, j])
                for j, name in enumerate(dataset.covariate_names)
            ]
        )
    out.observed = np.ones(dataset.n_rows, dtype=bool)
    return out


def impute_chained(
    dataset: LongitudinalDataset, cfg: ImputationConfig
) -> list[LongitudinalDataset]:
    """L completed copies of the dataset, one per imputation substream."""
    return [
        _impute_once(dataset, cfg, substream(cfg.seed, *cfg.seed_key, l, 0))
        for l in range(cfg.count)
    ]


# -- pooling -----------------------------------------------------------------


def rubin_pool(fits: list[GeeFit], replaced: int = 0) -> PooledFit:
    """Combine coefficient estimates across imputed-data fits."""
    if len(fits) < 2:
        raise ConfigError("pooling needs at least two fits")
    p = fits[0].p
    interim = fits[0].interim
    n_groups = fits[0].n_groups
    for f in fits:
        if not f.converged:
            raise ConvergenceError("cannot pool an unconverged fit")
        if f.p != p or f.interim != interim or f.n_groups != n_groups:
            raise ConfigError("pooled fits must share analysis, size, and model")
    L = len(fits)
    betas = np.stack([f.beta for f in fits])
    beta_bar = betas.mean(axis=0)
    within = symmetrize(np.mean([f.cov for f in fits], axis=0))
    centered = betas - beta_bar
    between = symmetrize((centered.T @ centered) / (L - 1))
    total = symmetrize(within + (1.0 + 1.0 / L) * between)
    nu = _rubin_nu(np.diag(within), np.diag(between), L)
    return PooledFit(
        beta=beta_bar,
        within=within,
        between=between,
        total=total,
        count=L,
        interim=interim,
        n_groups=n_groups,
        nu=nu,
        replaced=replaced,
    )


def _rubin_nu(within_diag, between_diag, L: int) -> np.ndarray:
    """Componentwise denominator degrees of freedom.

    Components with zero between-imputation spread get infinite df (their
    chi-square reference is exact).
    """
    within_diag = np.asarray(within_diag, dtype=float)
    between_diag = np.asarray(between_diag, dtype=float)
    nu = np.full(within_diag.shape, np.inf)
    pos = between_diag > 0
    ratio = within_diag[pos] / ((1.0 + 1.0 / L) * between_diag[pos])
    nu[pos] = (L - 1) * (1.0 + ratio) ** 2
    return nu


def pooled_wald(pooled: PooledFit, hyp: HypothesisSpec) -> WaldResult:
    """Wald test against the pooled covariance.

    With 30 or more imputations the statistic keeps its chi-square
    reference and any restriction is allowed. Below that the between-
    imputation noise matters: only linear restrictions are supported, the
    statistic is divided by its degrees of freedom, and the reference is
    F(q, nu) with nu the smallest componentwise df on the contrast scale.
    """
    if pooled.count >= CHI_SQUARE_MIN_IMPUTATIONS:
        return _wald_core(pooled.beta, pooled.total, hyp, interim=pooled.interim)
    if not hyp.is_linear:
        raise ConfigError(
            f"with {pooled.count} < {CHI_SQUARE_MIN_IMPUTATIONS} imputations the "
            "F reference only supports restrictions that are linear in the "
            "coefficients; supply a contrast matrix or raise the imputation count"
        )
    core = _wald_core(pooled.beta, pooled.total, hyp, interim=pooled.interim)
    A = hyp.contrast
    w_diag = np.diag(symmetrize(A @ pooled.within @ A.T))
    b_diag = np.diag(symmetrize(A @ pooled.between @ A.T))
    nu = float(np.min(_rubin_nu(w_diag, b_diag, pooled.count)))
    return dc_replace(core, regime="f_test", nu=nu)


# -- pipeline ----------------------------------------------------------------


def impute_and_fit(
    dataset: LongitudinalDataset,
    model: ModelSpec,
    corr: WorkingCorrelation | str,
    interim: int,
    cfg: ImputationConfig,
) -> PooledFit:
    """Impute, fit each completed dataset, pool.

    An imputation whose fit fails numerically (singular covariance,
    separation, divergence) is discarded and regenerated from an advanced
    substream; the replacement count is carried on the result.
    """
    fits = []
    replaced = 0
    for l in range(cfg.count):
        for attempt in range(cfg.max_retries + 1):
            rng = substream(cfg.seed, *cfg.seed_key, l, attempt)
            completed = _impute_once(dataset, cfg, rng)
            try:
                fits.append(fit_gee(completed, model, corr, interim=interim))
                break
            except NumericalError:
                replaced += 1
                continue
        else:
            raise NumericalError(
                f"imputation {l}: no usable fit after {cfg.max_retries} regenerations"
            )
    return rubin_pool(fits, replaced=replaced)


def compound_from_pooled(
    pooled: PooledFit, schedule: InterimSchedule
) -> CompoundCovariance:
    """Compound covariance anchored at a pooled fit.

    The pooled covariance of beta plays the role of the sandwich divided by
    the group count, so total * n_m is the marginal block to scale.
    """
    m = pooled.interim
    if not 1 <= m <= schedule.M:
        raise ConfigError(f"pooled analysis {m} outside the schedule's 1..{schedule.M}")
    if schedule.counts[m - 1] != pooled.n_groups:
        raise ConfigError(
            f"pooled fit used {pooled.n_groups} groups but the schedule plans "
            f"{schedule.counts[m - 1]} at analysis {m}"
        )
    sigma_m = pooled.total * pooled.n_groups
    return CompoundCovariance.from_marginal(sigma_m, schedule, source_interim=m)
