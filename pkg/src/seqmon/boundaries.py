"""Monte Carlo rejection boundaries for sequential Wald monitoring.

Null draws of the stacked coefficient deviations are taken from
MVN(0, sigma / n) using the compound covariance; each draw yields one Wald
statistic per analysis, computed against that analysis's marginal
covariance. A boundary shape maps a single scalar tau to per-analysis
thresholds (flat for pocock, tau / sqrt(m) for obf), and tau is calibrated
so the empirical probability of crossing any threshold equals alpha.

Draw generation is blocked; every block derives its own substream from
(seed, block index), so results do not depend on how blocks are scheduled.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import cho_factor, cho_solve as _cho_solve

from .exceptions import ConfigError, NumericalError, SingularMatrixError
from .gee import GeeFit
from .hypotheses import HypothesisSpec, WaldResult
from .linalg import sampling_cholesky, symmetrize
from .rng import substream
from .seqcov import CompoundCovariance, InterimSchedule, scale_blocks

RULES = ("pocock", "obf")

FORMAT_VERSION = 1


class Decision(str, Enum):
    REJECT_AND_STOP = "reject_and_stop"
    CONTINUE = "continue"
    FINAL_FAIL_TO_REJECT = "final_fail_to_reject"


@dataclass(frozen=True)
class BoundaryConfig:
    """Calibration settings.

    ``n_draws`` below 1e4 is refused and below 1e5 warned about: the
    calibration quantile gets too noisy. ``seed_key`` prefixes the block
    substreams, letting callers hang many independent calibrations off one
    master seed.
    """

    rule: str
    alpha: float = 0.05
    n_draws: int = 1_000_000
    seed: int = 0
    tol: float = 1e-3
    block_size: int = 100_000
    seed_key: tuple[int, ...] = field(default=())

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError(f"unknown boundary rule {self.rule!r}; choose from {RULES}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0, 1): {self.alpha}")
        if self.n_draws < 10_000:
            raise ConfigError("n_draws below 10000 gives an unusable calibration")
        if self.n_draws < 100_000:
            warnings.warn(
                "n_draws below 100000: boundary calibration will be noticeably noisy",
                stacklevel=2,
            )
        if self.block_size < 1:
            raise ConfigError("block_size must be positive")
        if self.tol <= 0:
            raise ConfigError("solver tolerance must be positive")
        object.__setattr__(self, "seed_key", tuple(int(k) for k in self.seed_key))


@dataclass(frozen=True)
class NullDraws:
    """Per-draw, per-analysis Wald statistics under the null."""

    stats: np.ndarray
    df: int
    seed: int
    seed_key: tuple[int, ...]
    source_interim: int | None
    latent: np.ndarray | None = None

    @property
    def n_draws(self) -> int:
        return self.stats.shape[0]

    @property
    def M(self) -> int:
        return self.stats.shape[1]


@dataclass(frozen=True)
class BoundaryResult:
    """A calibrated boundary: scalar tau_star and the per-analysis thresholds."""

    rule: str
    alpha: float
    n_draws: int
    seed: int
    tau_star: float
    thresholds: tuple[float, ...]
    achieved_level: float
    interim_index: int | None
    tol: float = 1e-3

    @property
    def M(self) -> int:
        return len(self.thresholds)

    def validate(self) -> None:
        if self.rule not in RULES:
            raise ConfigError(f"unknown boundary rule {self.rule!r}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0, 1): {self.alpha}")
        if self.M < 1:
            raise ConfigError("boundary needs at least one threshold")
        expect = rule_thresholds(self.rule, self.tau_star, self.M)
        if not np.allclose(self.thresholds, expect, rtol=1e-9, atol=1e-12):
            raise ConfigError(
                f"thresholds are inconsistent with rule {self.rule!r} and "
                f"tau_star {self.tau_star!r}"
            )
        slack = self.tol + 1.0 / self.n_draws
        if abs(self.achieved_level - self.alpha) > slack:
            raise ConfigError(
                f"achieved level {self.achieved_level:.6f} is {abs(self.achieved_level - self.alpha):.6f} "
                f"from alpha {self.alpha}; boundary record looks corrupted"
            )

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "rule": self.rule,
            "alpha": self.alpha,
            "n_draws": self.n_draws,
            "seed": self.seed,
            "tau_star": self.tau_star,
            "thresholds": list(self.thresholds),
            "achieved_level": self.achieved_level,
            "interim_index": self.interim_index,
            "tol": self.tol,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BoundaryResult":
        try:
            version = data["format_version"]
            if version != FORMAT_VERSION:
                raise ConfigError(f"unsupported boundary format version {version!r}")
            out = cls(
                rule=data["rule"],
                alpha=float(data["alpha"]),
                n_draws=int(data["n_draws"]),
                seed=int(data["seed"]),
                tau_star=float(data["tau_star"]),
                thresholds=tuple(float(t) for t in data["thresholds"]),
                achieved_level=float(data["achieved_level"]),
                interim_index=None if data["interim_index"] is None else int(data["interim_index"]),
                tol=float(data.get("tol", 1e-3)),
            )
        except KeyError as exc:
            raise ConfigError(f"boundary record is missing field {exc}")
        out.validate()
        return out


def rule_thresholds(rule: str, tau: float, M: int) -> np.ndarray:
    """Per-analysis thresholds implied by a scalar tau."""
    if rule == "pocock":
        return np.full(M, float(tau))
    if rule == "obf":
        return float(tau) / np.sqrt(np.arange(1, M + 1, dtype=float))
    raise ConfigError(f"unknown boundary rule {rule!r}")


def _scaled_maxima(draws: NullDraws, rule: str) -> np.ndarray:
    """Scalar summary per draw whose exceedance of tau means any crossing.

    T_m > tau / sqrt(m) is equivalent to sqrt(m) T_m > tau, so the maximum of
    the (rule-scaled) statistics carries the whole crossing event.
    """
    if rule == "pocock":
        return draws.stats.max(axis=1)
    if rule == "obf":
        scale = np.sqrt(np.arange(1, draws.M + 1, dtype=float))
        return (draws.stats * scale[None, :]).max(axis=1)
    raise ConfigError(f"unknown boundary rule {rule!r}")


def sample_null_draws(
    cc: CompoundCovariance,
    hyp: HypothesisSpec,
    cfg: BoundaryConfig,
    keep_latent: bool = False,
) -> NullDraws:
    """Draw null statistics for every analysis.

    Deviations of the stacked estimates are sampled from MVN(0, sigma / n);
    the analysis-r statistic is the Wald quadratic form of h(deviation) -
    gamma against the marginal block sigma[r, r]. For linear restrictions
    that inner matrix is factorized once per analysis.
    """
    M, p = cc.M, cc.p
    n = cc.schedule.n_final
    cov = cc.sigma_dense() / n
    L = sampling_cholesky(cov, name="compound covariance")
    B = cfg.n_draws
    stats = np.empty((B, M))
    latent = np.empty((B, M * p)) if keep_latent else None

    factors = None
    if hyp.is_linear:
        A = hyp.contrast
        factors = []
        for r in range(M):
            inner = symmetrize(A @ cc.sigma[r, r] @ A.T)
            try:
                factors.append(cho_factor(inner, lower=True))
            except np.linalg.LinAlgError:
                raise SingularMatrixError(
                    f"contrast covariance at analysis {r + 1} is singular"
                )

    n_blocks = math.ceil(B / cfg.block_size)
    for b in range(n_blocks):
        lo = b * cfg.block_size
        hi = min(lo + cfg.block_size, B)
        rng = substream(cfg.seed, *cfg.seed_key, b)
        z = rng.standard_normal((hi - lo, M * p))
        delta = z @ L.T
        if keep_latent:
            latent[lo:hi] = delta
        sub = delta.reshape(hi - lo, M, p)
        for r in range(M):
            if hyp.is_linear:
                u = sub[:, r, :] @ hyp.contrast.T - hyp.gamma[None, :]
                sol = _cho_solve(factors[r], u.T)
                stats[lo:hi, r] = n * np.einsum("qb,qb->b", u.T, sol)
            else:
                inner_fn = _general_inner(hyp, cc.sigma[r, r])
                for i in range(hi - lo):
                    stats[lo + i, r] = n * inner_fn(sub[i, r, :])
    return NullDraws(
        stats=stats,
        df=hyp.q,
        seed=cfg.seed,
        seed_key=cfg.seed_key,
        source_interim=cc.source_interim,
        latent=latent,
    )


def _general_inner(hyp: HypothesisSpec, sigma_rr: np.ndarray):
    """Quadratic form evaluator for a nonlinear restriction at one analysis."""

    def one(beta: np.ndarray) -> float:
        d = hyp.evaluate(beta) - hyp.gamma
        J = hyp.jacobian(beta)
        inner = symmetrize(J @ sigma_rr @ J.T)
        try:
            factor = cho_factor(inner, lower=True)
        except np.linalg.LinAlgError:
            raise SingularMatrixError("restriction covariance is singular at a draw")
        return float(d @ _cho_solve(factor, d))

    return one


def empirical_boundary_value(draws: NullDraws, rule: str, tau: float) -> float:
    """Probability that any analysis crosses its threshold at this tau.

    The first-crossing events (cross at m, having not crossed before) are
    disjoint and partition the crossing event, so this single union pass
    equals the per-analysis sum of first-crossing probabilities.
    """
    if draws.n_draws == 0:
        raise ConfigError("no draws to evaluate")
    if tau < 0:
        raise ConfigError("tau must be nonnegative for chi-square scale statistics")
    thr = rule_thresholds(rule, tau, draws.M)
    return float(np.mean((draws.stats > thr[None, :]).any(axis=1)))


def solve_tau(
    draws: NullDraws, rule: str, alpha: float, tol: float = 1e-3
) -> BoundaryResult:
    """Calibrate tau so the crossing probability equals alpha.

    The exceedance count is piecewise constant in tau, so the exact minimizer
    of |B_hat(tau) - alpha| is an order statistic: tau_star is the k-th
    largest scaled maximum with k = round(alpha * B), giving exactly k
    crossing draws (short of ties).
    """
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0, 1): {alpha}")
    B = draws.n_draws
    k = int(round(alpha * B))
    if k < 1:
        raise ConfigError(f"alpha {alpha} is below the 1/{B} resolution of these draws")
    if k >= B:
        raise ConfigError(f"alpha {alpha} too large for {B} draws")
    s = _scaled_maxima(draws, rule)
    tau_star = float(np.partition(s, B - k - 1)[B - k - 1])
    achieved = empirical_boundary_value(draws, rule, tau_star)
    if abs(achieved - alpha) > tol + 1.0 / B:
        raise NumericalError(
            f"calibration failed: achieved level {achieved:.6f} vs alpha {alpha} "
            "(heavy ties in the null statistics?)"
        )
    return BoundaryResult(
        rule=rule,
        alpha=alpha,
        n_draws=B,
        seed=draws.seed,
        tau_star=tau_star,
        thresholds=tuple(float(t) for t in rule_thresholds(rule, tau_star, draws.M)),
        achieved_level=achieved,
        interim_index=draws.source_interim,
        tol=tol,
    )


def compute_boundary(
    cc: CompoundCovariance, hyp: HypothesisSpec, cfg: BoundaryConfig
) -> BoundaryResult:
    """Sample and calibrate in one call."""
    draws = sample_null_draws(cc, hyp, cfg)
    return solve_tau(draws, cfg.rule, cfg.alpha, tol=cfg.tol)


def dynamic_boundary(
    fits: list[GeeFit],
    schedule: InterimSchedule,
    hyp: HypothesisSpec,
    cfg: BoundaryConfig,
) -> BoundaryResult:
    """Recalibrate the boundary from the latest fit.

    ``fits`` holds the converged fits up to the current analysis; the last
    one anchors the compound covariance, refreshing every threshold from the
    newest data.
    """
    if not fits:
        raise ConfigError("dynamic boundary needs at least one fit")
    cc = scale_blocks(fits[-1], schedule)
    return compute_boundary(cc, hyp, cfg)


def interim_decision(
    wald: WaldResult, boundary: BoundaryResult, interim: int | None = None
) -> Decision:
    """Compare one analysis's statistic to its threshold (strictly).

    Ties stay the course: the statistic must exceed the threshold to stop.
    """
    m = wald.interim if interim is None else int(interim)
    if not 1 <= m <= boundary.M:
        raise ConfigError(f"analysis {m} outside the boundary's 1..{boundary.M}")
    if wald.statistic > boundary.thresholds[m - 1]:
        return Decision.REJECT_AND_STOP
    if m == boundary.M:
        return Decision.FINAL_FAIL_TO_REJECT
    return Decision.CONTINUE
