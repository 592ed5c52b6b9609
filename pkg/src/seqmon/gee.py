"""Marginal regression for correlated outcomes with robust covariance.

Estimating equations: sum_i D_i' V_i^{-1} (Y_i - mu_i) = 0, where mu is the
inverse link of X beta, D_i is the Jacobian of mu_i in beta, and V_i is a
working covariance phi * A^{1/2} R A^{1/2} built from a variance function A
and a working correlation R (independence, exchangeable, or AR-1). Robust
(sandwich) and model-based covariance estimates are both produced; the
sandwich is consistent even when R is misspecified.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .datasets import LongitudinalDataset
from .exceptions import (
    ConfigError,
    ConvergenceError,
    DataError,
    SeparationError,
)
from .linalg import chol_inverse, chol_solve, symmetrize

LINKS = ("logit", "identity")
STRUCTURES = ("independence", "exchangeable", "ar1")

MAX_ITER = 100
SCORE_TOL = 1e-8
STEP_TOL = 1e-8
ETA_CAP = 50.0
RHO_MARGIN = 1e-6

TIME_ALIASES = ("time", "obs_time")


@dataclass(frozen=True)
class TimeFactor:
    """Indicator expansion of the shared observation times.

    Each non-baseline level contributes one indicator column, plus one
    interaction column per covariate named in ``interact_with``. Requires the
    same observation-time grid across groups.
    """

    levels: tuple[float, ...]
    baseline: float
    interact_with: tuple[str, ...] = ()

    def active_levels(self) -> tuple[float, ...]:
        out = tuple(t for t in self.levels if not np.isclose(t, self.baseline))
        if len(out) != len(self.levels) - 1:
            raise ConfigError("baseline must match exactly one declared level")
        return out


@dataclass(frozen=True)
class ModelSpec:
    """Mean model: link plus ordered design terms.

    Terms are covariate names or (name, name) pairs for products; the names
    ``time``/``obs_time`` refer to the observation-time column. An intercept
    is always the first design column. A TimeFactor appends its indicator
    columns (and their interactions) after the listed terms.
    """

    link: str
    terms: tuple = ()
    time_factor: TimeFactor | None = None

    def __post_init__(self):
        if self.link not in LINKS:
            raise ConfigError(f"unknown link {self.link!r}; choose from {LINKS}")
        object.__setattr__(self, "terms", tuple(
            tuple(t) if isinstance(t, (tuple, list)) else t for t in self.terms
        ))

    @property
    def p(self) -> int:
        k = 1 + len(self.terms)
        if self.time_factor is not None:
            n_ind = len(self.time_factor.levels) - 1
            k += n_ind * (1 + len(self.time_factor.interact_with))
        return k

    def column_names(self) -> tuple[str, ...]:
        names = ["intercept"]
        for t in self.terms:
            names.append(f"{t[0]}:{t[1]}" if isinstance(t, tuple) else str(t))
        if self.time_factor is not None:
            for lv in self.time_factor.active_levels():
                names.append(f"time[{lv:g}]")
            for cov in self.time_factor.interact_with:
                for lv in self.time_factor.active_levels():
                    names.append(f"{cov}:time[{lv:g}]")
        return tuple(names)


@dataclass(frozen=True)
class WorkingCorrelation:
    """Working correlation structure with its association estimates.

    ``rho`` is None for independence (and before estimation); ``phi`` is the
    dispersion. Pass just the structure (or this with rho=None) to fit_gee to
    have both estimated from Pearson residuals.
    """

    structure: str
    rho: float | None = None
    phi: float | None = None

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ConfigError(
                f"unknown working structure {self.structure!r}; choose from {STRUCTURES}"
            )
        if self.structure == "independence" and self.rho is not None:
            raise ConfigError("independence takes no correlation parameter")


@dataclass(frozen=True)
class GeeFit:
    """Converged fit at one analysis.

    ``bread`` is the (positive definite) average model-information matrix,
    ``meat`` the average outer product of group scores, ``robust`` the
    sandwich bread^{-1} meat bread^{-T}. ``cov`` (robust / n_groups) is the
    covariance of ``beta``; ``naive`` is the model-based counterpart.
    ``scores`` holds the per-group estimating-function contributions at the
    solution, one row per contributing group.
    """

    beta: np.ndarray
    interim: int
    n_groups: int
    converged: bool
    n_iter: int
    bread: np.ndarray
    meat: np.ndarray
    robust: np.ndarray
    naive: np.ndarray
    scores: np.ndarray
    corr: WorkingCorrelation
    model: ModelSpec

    @property
    def p(self) -> int:
        return self.beta.shape[0]

    @property
    def cov(self) -> np.ndarray:
        return self.robust / self.n_groups

    @property
    def robust_se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))


# -- design ----------------------------------------------------------------


def _resolve_column(name: str, dataset: LongitudinalDataset) -> np.ndarray:
    if name in TIME_ALIASES:
        return dataset.obs_time
    return dataset.covariate(name)


def expand_design(model: ModelSpec, dataset: LongitudinalDataset) -> np.ndarray:
    """Design matrix for every row of the dataset (callers mask rows)."""
    n = dataset.n_rows
    cols = [np.ones(n)]
    for t in model.terms:
        if isinstance(t, tuple):
            cols.append(_resolve_column(t[0], dataset) * _resolve_column(t[1], dataset))
        else:
            cols.append(_resolve_column(t, dataset))
    tf = model.time_factor
    if tf is not None:
        level_arr = np.asarray(tf.levels, dtype=float)
        hits = np.isclose(dataset.obs_time[:, None], level_arr[None, :], rtol=1e-9, atol=1e-9)
        if not (hits.sum(axis=1) == 1).all():
            raise DataError(
                "time factor: every observation time must match exactly one declared level"
            )
        indicators = [hits[:, j].astype(float) for j, lv in enumerate(tf.levels)
                      if not np.isclose(lv, tf.baseline)]
        cols.extend(indicators)
        for cov in tf.interact_with:
            vals = _resolve_column(cov, dataset)
            cols.extend(vals * ind for ind in indicators)
    return np.column_stack(cols)


# -- working covariance ----------------------------------------------------


def _check_rho(structure: str, rho: float, size: int) -> None:
    if structure == "exchangeable":
        lo = -1.0 / (size - 1) if size > 1 else -1.0
        if not (lo < rho < 1.0):
            raise ConfigError(
                f"exchangeable correlation {rho} outside ({lo:.4g}, 1) for group size {size}"
            )
    elif structure == "ar1":
        if not (-1.0 < rho < 1.0):
            raise ConfigError(f"ar1 correlation {rho} outside (-1, 1)")


def correlation_matrix(structure: str, rho: float | None, size: int) -> np.ndarray:
    """Working correlation matrix for one group size."""
    if structure not in STRUCTURES:
        raise ConfigError(f"unknown working structure {structure!r}; choose from {STRUCTURES}")
    if structure == "independence":
        return np.eye(size)
    if rho is None:
        raise ConfigError(f"{structure} requires a correlation value")
    _check_rho(structure, rho, size)
    if structure == "exchangeable":
        return (1.0 - rho) * np.eye(size) + rho * np.ones((size, size))
    lags = np.abs(np.arange(size)[:, None] - np.arange(size)[None, :])
    return rho ** lags


def build_working_cov(
    corr: WorkingCorrelation, variance_terms: np.ndarray
) -> np.ndarray:
    """V = phi * A^{1/2} R A^{1/2} for one group.

    ``variance_terms`` are the variance-function values v(mu), all positive.
    """
    v = np.asarray(variance_terms, dtype=float)
    if (v <= 0).any():
        raise DataError("variance terms must be strictly positive")
    phi = 1.0 if corr.phi is None else float(corr.phi)
    if phi <= 0:
        raise ConfigError("dispersion must be positive")
    r = correlation_matrix(corr.structure, corr.rho, v.size)
    half = np.sqrt(v)
    return phi * r * np.outer(half, half)


# -- association estimation --------------------------------------------------


def estimate_association(
    residuals, structure: str, n_params: int = 0
) -> WorkingCorrelation:
    """Moment estimates of (rho, phi) from per-group Pearson residuals.

    ``residuals`` is a sequence of 1-d arrays, one per group. phi is the mean
    squared residual with ``n_params`` subtracted from the denominator; rho
    averages within-group cross products (all pairs for exchangeable, lag-1
    pairs for ar1), scaled by phi and clamped inside the admissible range.
    """
    groups = [np.asarray(r, dtype=float).ravel() for r in residuals]
    if not groups:
        raise DataError("no residual groups supplied")
    total = int(sum(g.size for g in groups))
    if total <= n_params:
        raise DataError(f"{total} residuals cannot support {n_params} parameters")
    ssq = float(sum(float(g @ g) for g in groups))
    phi = ssq / (total - n_params)
    if phi <= 0:
        raise DataError("degenerate residuals: zero dispersion")
    if structure == "independence":
        return WorkingCorrelation("independence", None, phi)
    sizes = np.array([g.size for g in groups])
    if structure == "exchangeable":
        n_pairs = int(np.sum(sizes * (sizes - 1) // 2))
        if n_pairs == 0:
            raise DataError(
                "no within-group pairs: exchangeable needs groups of size >= 2 "
                "(use independence)"
            )
        cross = sum(0.5 * (float(g.sum()) ** 2 - float(g @ g)) for g in groups)
        rho = cross / n_pairs / phi
        smax = int(sizes.max())
        lo = -1.0 / (smax - 1)
        rho = float(np.clip(rho, lo + RHO_MARGIN, 1.0 - RHO_MARGIN))
    elif structure == "ar1":
        n_lags = int(np.sum(np.maximum(sizes - 1, 0)))
        if n_lags == 0:
            raise DataError(
                "no lag-1 pairs: ar1 needs groups of size >= 2 (use independence)"
            )
        lag1 = sum(float(g[:-1] @ g[1:]) for g in groups if g.size > 1)
        rho = lag1 / n_lags / phi
        rho = float(np.clip(rho, -1.0 + RHO_MARGIN, 1.0 - RHO_MARGIN))
    else:
        raise ConfigError(f"unknown working structure {structure!r}")
    return WorkingCorrelation(structure, rho, phi)


# -- fitting -----------------------------------------------------------------


def _size_classes(X: np.ndarray, y: np.ndarray, starts: np.ndarray):
    """Batch groups by size: {size: (X (g,s,p), y (g,s), group row indices)}."""
    sizes = np.diff(starts)
    classes = {}
    for s in np.unique(sizes):
        idx = np.flatnonzero(sizes == s)
        rows = (starts[idx][:, None] + np.arange(s)[None, :]).ravel()
        classes[int(s)] = (
            X[rows].reshape(idx.size, s, X.shape[1]),
            y[rows].reshape(idx.size, s),
            idx,
        )
    return classes


def _mean_and_variance(eta: np.ndarray, link: str):
    if link == "logit":
        mu = expit(eta)
        return mu, mu * (1.0 - mu)
    return eta, np.ones_like(eta)


class _FitState:
    """Score, information, and association at the current coefficient value."""

    __slots__ = ("corr", "score", "info", "group_scores", "phi")

    def __init__(self, model, classes, structure, beta, fixed_rho, n_groups_total, p):
        link = model.link
        resid_std = {}
        pearson_groups = []
        for s, (Xc, yc, idx) in classes.items():
            eta = Xc @ beta
            if np.max(np.abs(eta)) > ETA_CAP:
                raise SeparationError(
                    f"linear predictor exceeded {ETA_CAP:g} in magnitude; "
                    "data look separated or the model is unstable"
                )
            mu, v = _mean_and_variance(eta, link)
            if np.min(v) <= 0:
                # mu underflowed to exactly 0 or 1: separation in all but name
                raise SeparationError(
                    "fitted probabilities reached 0 or 1; data look separated"
                )
            half = np.sqrt(v)
            r = (yc - mu) / half
            resid_std[s] = (Xc, half, r, idx, link)
            pearson_groups.extend(r)
        assoc = estimate_association(pearson_groups, structure, n_params=p)
        if fixed_rho is not None:
            assoc = WorkingCorrelation(structure, fixed_rho, assoc.phi)
        self.corr = assoc
        phi = assoc.phi
        score = np.zeros(p)
        info = np.zeros((p, p))
        group_scores = np.zeros((n_groups_total, p))
        for s, (Xc, half, r, idx, link) in resid_std.items():
            rinv = chol_inverse(
                correlation_matrix(assoc.structure, assoc.rho, s),
                name="working correlation",
            )
            # G = A^{-1/2} D: scaled design for logit, plain design for identity
            G = half[:, :, None] * Xc if link == "logit" else Xc
            gs = np.einsum("gsp,st,gt->gp", G, rinv, r) / phi
            info += np.einsum("gsp,st,gtq->pq", G, rinv, G) / phi
            group_scores[idx] = gs
            score += gs.sum(axis=0)
        self.score = score
        self.info = symmetrize(info)
        self.group_scores = group_scores
        self.phi = phi


def sandwich(fit_or_bread, meat: np.ndarray | None = None):
    """Sandwich covariance pieces: (bread, meat, robust).

    Accepts either a GeeFit or the (bread, meat) pair; ``robust`` is
    bread^{-1} meat bread^{-T}, symmetrized.
    """
    if meat is None:
        fit = fit_or_bread
        if not fit.converged:
            raise ConvergenceError("sandwich requires a converged fit")
        bread, meat = fit.bread, fit.meat
    else:
        bread = fit_or_bread
    binv = chol_inverse(bread, name="bread (model information)")
    robust = symmetrize(binv @ symmetrize(meat) @ binv.T)
    return bread, meat, robust


def fit_gee(
    dataset: LongitudinalDataset,
    model: ModelSpec,
    corr: WorkingCorrelation | str = "independence",
    interim: int | None = None,
) -> GeeFit:
    """Fit the marginal model at one analysis.

    Groups enter when their membership flag for ``interim`` (1-based) is set;
    a dataset without membership is treated as a single final analysis. Only
    rows marked observed contribute. Association parameters are re-estimated
    from Pearson residuals before every scoring step (a fixed ``corr.rho`` is
    honored); iteration stops when the estimating function's sup norm falls
    below 1e-8, and fails after 100 steps.

    Raises SeparationError when the linear predictor runs past +-50, and
    SingularMatrixError on collinear designs.
    """
    if isinstance(corr, str):
        corr = WorkingCorrelation(corr)
    if dataset.membership is None:
        if interim not in (None, 1):
            raise ConfigError("dataset has no membership; only a single analysis exists")
        member = np.ones(dataset.n_groups, dtype=bool)
        interim = 1
    else:
        if interim is None:
            raise ConfigError("interim index required for a monitored dataset")
        if not 1 <= interim <= dataset.n_interims:
            raise ConfigError(
                f"interim {interim} outside 1..{dataset.n_interims}"
            )
        member = dataset.membership[:, interim - 1]
    n_m = int(member.sum())
    if n_m < 2:
        raise DataError("need at least two groups to fit")

    X_all = expand_design(model, dataset)
    p = model.p
    keep_rows = member[dataset.group_id] & dataset.observed
    if model.link == "logit":
        y_seen = dataset.outcome[keep_rows]
        if not np.isin(y_seen, (0.0, 1.0)).all():
            raise DataError("logit link requires 0/1 outcomes")
    if int(keep_rows.sum()) <= p:
        raise DataError(
            f"{int(keep_rows.sum())} usable rows cannot identify {p} coefficients"
        )
    X = X_all[keep_rows]
    y = dataset.outcome[keep_rows]
    gid = dataset.group_id[keep_rows]
    # contributing groups, re-indexed contiguously in original order
    contrib = np.unique(gid)
    local = np.searchsorted(contrib, gid)
    starts = np.concatenate(([0], 1 + np.flatnonzero(np.diff(local) != 0), [local.size]))
    classes = _size_classes(X, y, starts)

    beta = np.zeros(p)
    state = None
    converged = False
    n_iter = 0
    for n_iter in range(1, MAX_ITER + 1):
        state = _FitState(model, classes, corr.structure, beta, corr.rho, contrib.size, p)
        if np.max(np.abs(state.score)) < SCORE_TOL:
            converged = True
            break
        step = chol_solve(state.info, state.score, name="model information")
        beta = beta + step
        if np.max(np.abs(step)) <= STEP_TOL * (1.0 + np.max(np.abs(beta))):
            # one refresh pass so the stored state matches the final beta
            state = _FitState(model, classes, corr.structure, beta, corr.rho, contrib.size, p)
            converged = bool(np.max(np.abs(state.score)) < SCORE_TOL)
            if converged:
                break
    if not converged:
        raise ConvergenceError(
            f"no convergence in {MAX_ITER} iterations "
            f"(score sup norm {np.max(np.abs(state.score)):.3e})"
        )

    bread = symmetrize(state.info / n_m)
    meat = symmetrize((state.group_scores.T @ state.group_scores) / n_m)
    _, _, robust = sandwich(bread, meat)
    naive = chol_inverse(state.info, name="model information")
    return GeeFit(
        beta=beta,
        interim=interim,
        n_groups=n_m,
        converged=True,
        n_iter=n_iter,
        bread=bread,
        meat=meat,
        robust=robust,
        naive=naive,
        scores=state.group_scores,
        corr=state.corr,
        model=model,
    )
