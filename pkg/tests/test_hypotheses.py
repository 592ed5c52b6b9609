import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats
from scipy.special import expit

from seqmon import (
    ConfigError,
    ConvergenceError,
    HypothesisSpec,
    ModelSpec,
    SingularMatrixError,
    WaldResult,
    builtin_hypothesis,
    fit_gee,
    reference_pvalue,
    wald_statistic,
)
from seqmon.hypotheses import contrast_rank

from helpers import balanced, fake_fit


def simple_fit(rng, n=80):
    x = rng.standard_normal((n, 3))
    y = (rng.random((n, 3)) < expit(0.4 * x)).astype(float)
    ds = balanced(y, covariates=[x], names=("x",))
    return fit_gee(ds, ModelSpec("logit", ("x", "time")))


def test_scalar_wald_equals_squared_z():
    rng = np.random.default_rng(0)
    fit = simple_fit(rng)
    hyp = HypothesisSpec.linear([[0.0, 1.0, 0.0]])
    res = wald_statistic(fit, hyp)
    z = fit.beta[1] / np.sqrt(fit.cov[1, 1])
    assert_allclose(res.statistic, z ** 2, rtol=1e-12)
    assert res.df == 1 and res.regime == "chi_square"
    assert_allclose(reference_pvalue(res), stats.chi2.sf(z ** 2, 1), rtol=1e-12)


def test_joint_wald_quadratic_form():
    rng = np.random.default_rng(1)
    fit = simple_fit(rng)
    A = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    res = wald_statistic(fit, HypothesisSpec.linear(A))
    d = A @ fit.beta
    oracle = d @ np.linalg.solve(A @ fit.cov @ A.T, d)
    assert_allclose(res.statistic, oracle, rtol=1e-10)
    assert res.df == 2


def test_nonzero_gamma_shifts_the_center():
    rng = np.random.default_rng(2)
    fit = simple_fit(rng)
    c = [[0.0, 1.0, 0.0]]
    at_estimate = HypothesisSpec.linear(c, gamma=[fit.beta[1]])
    res = wald_statistic(fit, at_estimate)
    assert res.statistic < 1e-20  # testing the fitted value itself


def test_contrast_row_scaling_invariance():
    rng = np.random.default_rng(3)
    fit = simple_fit(rng)
    A = np.array([[0.0, 1.0, 0.0], [0.0, 1.0, 1.0]])
    g = np.array([0.1, -0.2])
    D = np.diag([3.0, -0.5])
    t1 = wald_statistic(fit, HypothesisSpec.linear(A, g)).statistic
    t2 = wald_statistic(fit, HypothesisSpec.linear(D @ A, D @ g)).statistic
    assert_allclose(t1, t2, rtol=1e-10)


def test_linear_construction_rejects_dependent_rows():
    with pytest.raises(ConfigError, match="linearly dependent"):
        HypothesisSpec.linear([[1.0, 0.0], [2.0, 0.0]])
    with pytest.raises(ConfigError, match="gamma"):
        HypothesisSpec.linear([[1.0, 0.0]], gamma=[0.0, 1.0])


def test_rank_deficient_inner_matrix_reports_rank():
    fit = fake_fit(np.zeros(2), np.ones((2, 2)))  # perfectly correlated components
    hyp = HypothesisSpec.linear(np.eye(2))
    with pytest.raises(SingularMatrixError) as err:
        wald_statistic(fit, hyp)
    assert err.value.rank == 1
    assert contrast_rank(np.eye(2), np.ones((2, 2))) == 1


def test_general_restriction_with_finite_differences():
    rng = np.random.default_rng(4)
    fit = simple_fit(rng)

    def h(beta):
        return np.array([beta[1] ** 2 + beta[2]])

    hyp = HypothesisSpec.general(h, q=1)
    assert hyp.fd_fallback
    beta = np.array([0.3, -0.4, 0.2])
    J = hyp.jacobian(beta)
    assert_allclose(J, [[0.0, -0.8, 1.0]], rtol=1e-6, atol=1e-8)
    res = wald_statistic(fit, hyp)
    assert res.fd_jacobian
    # delta method by hand
    Jf = hyp.jacobian(fit.beta)
    d = h(fit.beta)
    oracle = d @ np.linalg.solve(Jf @ fit.cov @ Jf.T, d)
    assert_allclose(res.statistic, oracle, rtol=1e-8)


def test_analytic_jacobian_is_validated():
    def h(beta):
        return np.array([beta[0] * beta[1]])

    good = HypothesisSpec.general(
        h, q=1, jacobian=lambda b: np.array([[b[1], b[0]]])
    )
    assert not good.fd_fallback
    beta = np.array([1.5, -2.0])
    assert_allclose(good.jacobian(beta), [[-2.0, 1.5]], rtol=1e-9)

    bad = HypothesisSpec.general(
        h, q=1, jacobian=lambda b: np.array([[b[1], -b[0]]])
    )
    with pytest.raises(ConfigError, match="[Jj]acobian"):
        bad.jacobian(beta)


def test_general_restriction_shape_checked():
    hyp = HypothesisSpec.general(lambda b: np.array([b[0], b[1]]), q=1)
    with pytest.raises(ConfigError, match="expected"):
        hyp.evaluate(np.zeros(2))


def test_f_regime_pvalue_approaches_chi_square():
    res_chi = WaldResult(interim=1, statistic=5.6, df=2, estimate=np.zeros(2),
                         covariance=np.eye(2))
    res_f = WaldResult(interim=1, statistic=5.6, df=2, estimate=np.zeros(2),
                       covariance=np.eye(2), regime="f_test", nu=1e9)
    assert abs(reference_pvalue(res_f) - reference_pvalue(res_chi)) < 1e-3
    assert_allclose(reference_pvalue(res_f), stats.f.sf(2.8, 2, 1e9), rtol=1e-12)
    with pytest.raises(ConfigError, match="denominator"):
        reference_pvalue(WaldResult(interim=1, statistic=1.0, df=1,
                                    estimate=np.zeros(1), covariance=np.eye(1),
                                    regime="f_test"))


def test_builtin_hypotheses():
    scalar = builtin_hypothesis("interaction_scalar")
    assert scalar.q == 1 and scalar.contrast.shape == (1, 5)
    assert_allclose(scalar.contrast[0], [0, 0, 0, 1, 0])
    joint = builtin_hypothesis("discrete_interaction_joint")
    assert joint.q == 4 and joint.contrast.shape == (4, 11)
    assert_allclose(joint.contrast[:, 7:], np.eye(4))
    assert_allclose(joint.contrast[:, :7], 0)
    with pytest.raises(ConfigError, match="unknown"):
        builtin_hypothesis("nope")


def test_wald_requires_convergence():
    fit = fake_fit(np.zeros(2), np.eye(2), converged=False)
    with pytest.raises(ConvergenceError):
        wald_statistic(fit, HypothesisSpec.linear([[1.0, 0.0]]))
