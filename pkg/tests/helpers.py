"""Shared builders for the test suite."""
import numpy as np

from seqmon import GeeFit, LongitudinalDataset, ModelSpec, WorkingCorrelation


def balanced(outcome, covariates=(), names=(), times=None, arrival=None,
             observed=None, membership=None):
    """Dataset from an (n, s) outcome array.

    Covariates may be (n, s) arrays or length-n group constants.
    """
    y = np.asarray(outcome, dtype=float)
    n, s = y.shape
    t = np.arange(1.0, s + 1.0) if times is None else np.asarray(times, dtype=float)
    cols = []
    for c in covariates:
        c = np.asarray(c, dtype=float)
        if c.ndim == 1:
            c = np.repeat(c[:, None], s, axis=1)
        cols.append(c.ravel())
    return LongitudinalDataset(
        group_id=np.repeat(np.arange(n), s),
        obs_time=np.tile(t, n),
        arrival_time=(np.repeat(np.arange(n, dtype=float), s)
                      if arrival is None else np.asarray(arrival, dtype=float)),
        outcome=y.ravel(),
        covariate_names=tuple(names),
        covariates=np.column_stack(cols) if cols else np.empty((n * s, 0)),
        observed=(np.ones(n * s, dtype=bool)
                  if observed is None else np.asarray(observed, dtype=bool)),
        membership=membership,
    )


def fake_fit(beta, cov, interim=1, n_groups=100, model=None, converged=True):
    """Hand-built GeeFit with the given coefficient covariance."""
    beta = np.asarray(beta, dtype=float)
    cov = np.asarray(cov, dtype=float)
    p = beta.size
    robust = cov * n_groups
    return GeeFit(
        beta=beta,
        interim=interim,
        n_groups=n_groups,
        converged=converged,
        n_iter=1,
        bread=np.eye(p),
        meat=robust.copy(),
        robust=robust,
        naive=cov.copy(),
        scores=np.zeros((n_groups, p)),
        corr=WorkingCorrelation("independence"),
        model=model if model is not None else ModelSpec("identity", ()),
    )
