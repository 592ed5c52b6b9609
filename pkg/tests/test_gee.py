import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.special import expit

import seqmon.gee
from seqmon import (
    ConfigError,
    ConvergenceError,
    DataError,
    ModelSpec,
    SeparationError,
    SingularMatrixError,
    TimeFactor,
    WorkingCorrelation,
    correlation_matrix,
    estimate_association,
    expand_design,
    fit_gee,
)

from helpers import balanced

TIMES = (1.0 / 12.0, 3.0 / 12.0, 6.0 / 12.0, 1.0, 2.0)


def continuous_spec():
    return ModelSpec(link="logit", terms=("A", "time", ("A", "time"), "Z"))


def discrete_spec():
    return ModelSpec(
        link="logit",
        terms=("A", "Z"),
        time_factor=TimeFactor(levels=TIMES, baseline=TIMES[0], interact_with=("A",)),
    )


def logistic_data(rng, n, s=3, beta=(0.2, 0.5, -0.3)):
    """Independent-rows logistic data wrapped into groups of size s."""
    x = rng.standard_normal((n, s))
    eta = beta[0] + beta[1] * x + beta[2] * np.tile(np.arange(1.0, s + 1.0), (n, 1))
    y = (rng.random((n, s)) < expit(eta)).astype(float)
    ds = balanced(y, covariates=[x], names=("x",))
    return ds, ModelSpec(link="logit", terms=("x", "time"))


# -- design expansion --------------------------------------------------------


def test_design_row_continuous():
    ds = balanced(np.zeros((1, 1)), covariates=[[1.0], [0.5]], names=("A", "Z"),
                  times=[2.0])
    row = expand_design(continuous_spec(), ds)[0]
    assert_allclose(row, [1.0, 1.0, 2.0, 2.0, 0.5])


def test_design_row_discrete_third_visit():
    ds = balanced(np.zeros((1, 1)), covariates=[[1.0], [0.3]], names=("A", "Z"),
                  times=[TIMES[2]])
    row = expand_design(discrete_spec(), ds)[0]
    # intercept, A, Z, four visit indicators, four A-by-visit products
    assert_allclose(row, [1, 1, 0.3, 0, 1, 0, 0, 0, 1, 0, 0])
    assert discrete_spec().p == 11


def test_design_discrete_baseline_row_has_no_indicators():
    ds = balanced(np.zeros((1, 1)), covariates=[[1.0], [0.3]], names=("A", "Z"),
                  times=[TIMES[0]])
    row = expand_design(discrete_spec(), ds)[0]
    assert_allclose(row, [1, 1, 0.3, 0, 0, 0, 0, 0, 0, 0, 0])


def test_design_column_names():
    names = continuous_spec().column_names()
    assert names == ("intercept", "A", "time", "A:time", "Z")
    dnames = discrete_spec().column_names()
    assert dnames[:3] == ("intercept", "A", "Z")
    assert len(dnames) == 11 and dnames[3].startswith("time[")


def test_design_rejects_off_grid_time():
    ds = balanced(np.zeros((1, 1)), covariates=[[1.0], [0.3]], names=("A", "Z"),
                  times=[0.4])
    with pytest.raises(DataError, match="exactly one declared level"):
        expand_design(discrete_spec(), ds)


def test_design_unknown_covariate():
    ds = balanced(np.zeros((1, 1)))
    with pytest.raises(DataError, match="unknown covariate"):
        expand_design(ModelSpec("logit", ("missing",)), ds)


# -- working correlation -----------------------------------------------------


def test_correlation_matrices():
    assert_allclose(correlation_matrix("independence", None, 3), np.eye(3))
    ex = correlation_matrix("exchangeable", 0.3, 3)
    assert_allclose(ex, 0.7 * np.eye(3) + 0.3)
    ar = correlation_matrix("ar1", 0.5, 4)
    lags = np.abs(np.arange(4)[:, None] - np.arange(4))
    assert_allclose(ar, 0.5 ** lags)
    # admissible parameters give positive definite matrices
    assert np.linalg.eigvalsh(ex).min() > 0
    assert np.linalg.eigvalsh(ar).min() > 0


def test_correlation_matrix_rejects_inadmissible():
    with pytest.raises(ConfigError):
        correlation_matrix("exchangeable", -0.6, 3)  # below -1/(s-1)
    with pytest.raises(ConfigError):
        correlation_matrix("ar1", 1.0, 3)
    with pytest.raises(ConfigError, match="unknown working structure"):
        correlation_matrix("toeplitz", 0.2, 3)
    with pytest.raises(ConfigError):
        WorkingCorrelation("banded")
    with pytest.raises(ConfigError):
        WorkingCorrelation("independence", rho=0.2)


def test_association_exchangeable_hand_oracle():
    # two groups of two: residual products (1*1) and (-1*-1), one pair each
    est = estimate_association([np.array([1.0, 1.0]), np.array([-1.0, -1.0])],
                               "exchangeable")
    assert_allclose(est.phi, 1.0)
    assert_allclose(est.rho, 1.0 - 1e-6)  # perfect correlation, clamped inside


def test_association_exchangeable_lower_clamp():
    est = estimate_association([np.array([1.0, -1.0]), np.array([-1.0, 1.0])],
                               "exchangeable")
    assert_allclose(est.rho, -1.0 + 1e-6)  # clamp at -1/(s_max - 1) + margin


def test_association_ar1_hand_oracle():
    est = estimate_association([np.array([1.0, 0.5, 0.25])], "ar1")
    # phi = (1 + .25 + .0625)/3; lag-1 average = (.5 + .125)/2
    assert_allclose(est.phi, 0.4375)
    assert_allclose(est.rho, 0.3125 / 0.4375)


def test_association_uses_parameter_count_in_dispersion():
    resid = [np.array([1.0, -1.0]), np.array([2.0, 0.0])]
    bare = estimate_association(resid, "independence")
    adj = estimate_association(resid, "independence", n_params=2)
    assert_allclose(bare.phi, 6.0 / 4.0)
    assert_allclose(adj.phi, 6.0 / 2.0)


# -- fitting oracles ---------------------------------------------------------


def test_identity_independence_equals_least_squares():
    rng = np.random.default_rng(1)
    n, s = 40, 3
    x = rng.standard_normal((n, s))
    y = 1.0 + 0.5 * x + rng.standard_normal((n, s))
    ds = balanced(y, covariates=[x], names=("x",))
    fit = fit_gee(ds, ModelSpec("identity", ("x", "time")))
    X = np.column_stack([np.ones(n * s), ds.covariates[:, 0], ds.obs_time])
    beta_ols, *_ = np.linalg.lstsq(X, ds.outcome, rcond=None)
    assert_allclose(fit.beta, beta_ols, rtol=1e-12, atol=1e-12)
    assert fit.n_iter == 2  # one linear step, one confirming pass
    assert np.max(np.abs(fit.scores.sum(axis=0))) < 1e-8


def test_logistic_matches_newton_oracle():
    rng = np.random.default_rng(2)
    ds, model = logistic_data(rng, 80)
    fit = fit_gee(ds, model)
    # independent Newton-Raphson on the pooled rows
    X = np.column_stack([np.ones(ds.n_rows), ds.covariates[:, 0], ds.obs_time])
    y = ds.outcome
    beta = np.zeros(3)
    for _ in range(60):
        mu = expit(X @ beta)
        W = mu * (1 - mu)
        step = np.linalg.solve((X * W[:, None]).T @ X, X.T @ (y - mu))
        beta = beta + step
        if np.max(np.abs(step)) < 1e-12:
            break
    assert_allclose(fit.beta, beta, rtol=1e-6, atol=1e-8)
    # model-based covariance is dispersion times inverse information
    mu = expit(X @ beta)
    W = mu * (1 - mu)
    hinv = np.linalg.inv((X * W[:, None]).T @ X)
    assert_allclose(fit.naive, fit.corr.phi * hinv, rtol=1e-6)


def test_cluster_sandwich_oracle():
    rng = np.random.default_rng(3)
    ds, model = logistic_data(rng, 60)
    fit = fit_gee(ds, model)
    X = np.column_stack([np.ones(ds.n_rows), ds.covariates[:, 0], ds.obs_time])
    mu = expit(X @ fit.beta)
    W = mu * (1 - mu)
    H = (X * W[:, None]).T @ X
    resid = ds.outcome - mu
    # cluster-level scores; the dispersion factor cancels in the sandwich
    S = np.zeros((60, 3))
    for i in range(60):
        rows = slice(3 * i, 3 * i + 3)
        S[i] = X[rows].T @ resid[rows]
    oracle = np.linalg.inv(H) @ (S.T @ S) @ np.linalg.inv(H)
    assert_allclose(fit.cov, oracle, rtol=1e-8, atol=1e-12)


def test_identity_scale_equivariance():
    # scaling the outcome scales beta and the covariance, not the z statistics
    rng = np.random.default_rng(4)
    x = rng.standard_normal((30, 4))
    y = 0.3 * x + rng.standard_normal((30, 4))
    model = ModelSpec("identity", ("x",))
    f1 = fit_gee(balanced(y, covariates=[x], names=("x",)), model)
    f9 = fit_gee(balanced(9.0 * y, covariates=[x], names=("x",)), model)
    assert_allclose(f9.beta, 9.0 * f1.beta, rtol=1e-9)
    assert_allclose(f9.corr.phi, 81.0 * f1.corr.phi, rtol=1e-9)
    assert_allclose(f9.cov, 81.0 * f1.cov, rtol=1e-9)
    assert_allclose(f9.beta / f9.robust_se, f1.beta / f1.robust_se, rtol=1e-9)


def test_robust_se_tracks_truth_under_misspecified_independence():
    # cluster-constant covariate with strong intra-cluster correlation:
    # the sandwich stays honest, the model-based variance does not
    rng = np.random.default_rng(5)
    reps, n, s = 1500, 100, 4
    beta_hat = np.empty(reps)
    robust_var = np.empty(reps)
    naive_var = np.empty(reps)
    model = ModelSpec("identity", ("x",))
    for r in range(reps):
        x = rng.standard_normal(n)
        b = rng.standard_normal(n)
        y = 0.5 * x[:, None] + b[:, None] + 0.5 * rng.standard_normal((n, s))
        fit = fit_gee(balanced(y, covariates=[x], names=("x",)), model)
        beta_hat[r] = fit.beta[1]
        robust_var[r] = fit.cov[1, 1]
        naive_var[r] = fit.naive[1, 1]  # already on the covariance scale
    emp = beta_hat.var(ddof=1)
    assert abs(robust_var.mean() / emp - 1.0) < 0.12
    assert naive_var.mean() / emp < 0.5  # ICC = 0.8 makes it far too small


def test_exchangeable_association_recovers_truth():
    rng = np.random.default_rng(6)
    n, s, rho = 2000, 4, 0.4
    cov = (1 - rho) * np.eye(s) + rho
    noise = rng.multivariate_normal(np.zeros(s), cov, size=n)
    x = rng.standard_normal((n, s))
    y = 1.0 + 0.5 * x + noise
    fit = fit_gee(balanced(y, covariates=[x], names=("x",)),
                  ModelSpec("identity", ("x",)), corr="exchangeable")
    assert abs(fit.corr.rho - rho) < 0.05
    assert abs(fit.corr.phi - 1.0) < 0.1
    assert_allclose(fit.beta, [1.0, 0.5], atol=0.06)


def test_fixed_rho_is_honored():
    rng = np.random.default_rng(7)
    ds, model = logistic_data(rng, 50)
    fit = fit_gee(ds, model, corr=WorkingCorrelation("exchangeable", rho=0.25))
    assert fit.corr.rho == 0.25
    free = fit_gee(ds, model, corr="exchangeable")
    assert free.corr.rho != 0.25


def test_working_structure_changes_estimates_but_not_validity():
    rng = np.random.default_rng(8)
    ds, model = logistic_data(rng, 300)
    fits = {s: fit_gee(ds, model, corr=s) for s in ("independence", "exchangeable", "ar1")}
    betas = np.stack([f.beta for f in fits.values()])
    assert np.max(np.abs(betas - betas[0])) < 0.1  # all consistent for the mean
    for f in fits.values():
        assert np.max(np.abs(f.scores.sum(axis=0))) < 1e-8


def test_interim_fit_equals_fit_on_subset():
    rng = np.random.default_rng(9)
    ds, model = logistic_data(rng, 40)
    from seqmon import assign_membership_by_counts
    ds = assign_membership_by_counts(ds, (15, 40))
    monitored = fit_gee(ds, model, interim=1)
    first = ds.subset_groups(ds.membership[:, 0])
    first.membership = None
    plain = fit_gee(first, model)
    assert_allclose(monitored.beta, plain.beta, rtol=1e-12)
    assert_allclose(monitored.robust, plain.robust, rtol=1e-12)
    assert monitored.n_groups == 15
    assert monitored.interim == 1


def test_score_sup_norm_at_solution():
    rng = np.random.default_rng(10)
    ds, model = logistic_data(rng, 70)
    for corr in ("independence", "exchangeable", "ar1"):
        fit = fit_gee(ds, model, corr=corr)
        assert np.max(np.abs(fit.scores.sum(axis=0))) < 1e-8


def test_unobserved_rows_are_excluded():
    rng = np.random.default_rng(11)
    ds, model = logistic_data(rng, 50)
    drop = rng.random(ds.n_rows) < 0.2
    ds.observed[drop] = False
    ds.outcome[drop] = np.nan
    fit = fit_gee(ds, model)
    import dataclasses
    keep = ~drop
    sub = dataclasses.replace(
        ds,
        group_id=ds.group_id[keep], obs_time=ds.obs_time[keep],
        arrival_time=ds.arrival_time[keep], outcome=ds.outcome[keep],
        covariates=ds.covariates[keep], observed=ds.observed[keep],
    )
    explicit = fit_gee(sub, model)
    assert_allclose(fit.beta, explicit.beta, rtol=1e-12)


def test_separation_raises():
    x = np.linspace(-2, 2, 30).reshape(15, 2)
    y = (x > 0).astype(float)
    ds = balanced(y, covariates=[x], names=("x",))
    with pytest.raises(SeparationError):
        fit_gee(ds, ModelSpec("logit", ("x",)))


def test_collinear_design_raises():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((20, 3))
    y = (rng.random((20, 3)) < 0.5).astype(float)
    ds = balanced(y, covariates=[x, 2.0 * x], names=("x", "x2"))
    with pytest.raises(SingularMatrixError):
        fit_gee(ds, ModelSpec("logit", ("x", "x2")))


def test_iteration_cap(monkeypatch):
    rng = np.random.default_rng(13)
    ds, model = logistic_data(rng, 50)
    monkeypatch.setattr(seqmon.gee, "MAX_ITER", 1)
    with pytest.raises(ConvergenceError, match="no convergence"):
        fit_gee(ds, model)


def test_logit_needs_binary_outcomes():
    ds = balanced(np.full((5, 2), 0.5), covariates=[np.ones((5, 2))], names=("x",))
    with pytest.raises(DataError, match="0/1"):
        fit_gee(ds, ModelSpec("logit", ("x",)))


def test_monitored_dataset_needs_interim_index():
    rng = np.random.default_rng(14)
    ds, model = logistic_data(rng, 30)
    from seqmon import assign_membership_by_counts
    ds = assign_membership_by_counts(ds, (10, 30))
    with pytest.raises(ConfigError, match="interim index required"):
        fit_gee(ds, model)
    with pytest.raises(ConfigError, match="outside"):
        fit_gee(ds, model, interim=3)


def test_unbalanced_groups_fit():
    # group sizes cycling 1, 2, 3 exercise the per-size batching
    rng = np.random.default_rng(15)
    ds, model = logistic_data(rng, 60)
    import dataclasses
    visit = np.tile(np.arange(3), 60)
    keep = visit < (ds.group_id % 3) + 1
    assert np.unique(ds.group_id[keep]).size == 60
    sub = dataclasses.replace(
        ds,
        group_id=ds.group_id[keep], obs_time=ds.obs_time[keep],
        arrival_time=ds.arrival_time[keep], outcome=ds.outcome[keep],
        covariates=ds.covariates[keep], observed=ds.observed[keep],
    )
    for corr in ("independence", "exchangeable", "ar1"):
        fit = fit_gee(sub, model, corr=corr)
        assert fit.converged
        assert np.max(np.abs(fit.scores.sum(axis=0))) < 1e-8
