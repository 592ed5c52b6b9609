"""Synthetic monitored trials and their operating characteristics.

Groups share a five-visit observation grid. Binary outcomes follow a
marginal logistic model whose linear predictor is perturbed by a latent
Gaussian with an exponential-in-time-distance covariance kernel, giving
serially correlated within-group outcomes. Two mean models are supported:
a continuous treatment-by-time interaction (p = 5) and a saturated visit
model with per-visit interactions (p = 11).

Staggered entry is modeled with exponential inter-arrival times, fixed
within-subject visit offsets, and two recruitment pauses; a monitored
snapshot censors every visit past the analysis cut. Covariate-dependent
missingness removes outcome and Z jointly with probability driven by Z.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace as dc_replace

import numpy as np
from joblib import Parallel, delayed
from scipy import stats
from scipy.special import expit

from .boundaries import BoundaryConfig, sample_null_draws, solve_tau
from .datasets import LongitudinalDataset, assign_membership_by_counts
from .exceptions import ConfigError, NumericalError
from .gee import ModelSpec, TimeFactor, fit_gee
from .hypotheses import (
    HypothesisSpec,
    discrete_interaction_joint_contrast,
    interaction_scalar_contrast,
    wald_statistic,
)
from .imputation import ImputationConfig, compound_from_pooled, impute_and_fit, pooled_wald
from .rng import substream
from .seqcov import InterimSchedule, scale_blocks

TIMES = (1.0 / 12.0, 3.0 / 12.0, 6.0 / 12.0, 1.0, 2.0)
Z_MEAN = 1.0
Z_SD = 0.25
ARRIVAL_MEAN_GAP = 1.0 / 96.0
PAUSE_AFTER = (85, 185)
PAUSE_LENGTH = 1.25
MAR_INTERCEPTS = {"low": 3.1, "high": 2.1}
FAILURE_BUDGET = 0.02

TIME_MODELS = ("continuous", "discrete")
MISSINGNESS = ("none", "low", "high")

RATE_KEYS = ("naive", "pocock_static", "pocock_dynamic", "obf_static", "obf_dynamic")


def continuous_model() -> ModelSpec:
    """Logistic mean with treatment, linear time, their product, and Z."""
    return ModelSpec(link="logit", terms=("A", "time", ("A", "time"), "Z"))


def discrete_model() -> ModelSpec:
    """Logistic mean with per-visit effects and per-visit treatment interactions."""
    return ModelSpec(
        link="logit",
        terms=("A", "Z"),
        time_factor=TimeFactor(levels=TIMES, baseline=TIMES[0], interact_with=("A",)),
    )


def default_coefficients(time_model: str, effect: float = 0.0) -> np.ndarray:
    """Generating coefficients; ``effect`` sets the treatment-time interaction.

    For the continuous model ``effect`` is the interaction slope itself. For
    the discrete model the four visit interactions are ``effect`` times the
    non-baseline visit times, mimicking a linear-in-time departure.
    """
    if time_model == "continuous":
        return np.array([0.1, 0.1, -0.1, float(effect), 0.1])
    if time_model == "discrete":
        visit = np.asarray(TIMES[1:], dtype=float)
        return np.concatenate(([0.1, 0.1, 0.1], np.full(4, -0.1), effect * visit))
    raise ConfigError(f"unknown time model {time_model!r}; choose from {TIME_MODELS}")


def scenario_model(time_model: str) -> ModelSpec:
    return continuous_model() if time_model == "continuous" else discrete_model()


def scenario_hypothesis(time_model: str) -> HypothesisSpec:
    if time_model == "continuous":
        return interaction_scalar_contrast()
    return discrete_interaction_joint_contrast()


@dataclass(frozen=True)
class SimScenario:
    """One operating-characteristics cell.

    ``effect`` is the interaction strength (0 for size, nonzero for power);
    ``working`` the working correlation used for fitting; ``missingness``
    selects the complete-data path or the staggered-entry missing-data path
    at the given intensity. ``boundary_draws`` calibrates each boundary;
    ``imputations``/``sweeps`` configure the missing-data path.
    """

    time_model: str
    n: int
    replicates: int
    seed: int
    effect: float = 0.0
    working: str = "independence"
    missingness: str = "none"
    fractions: tuple[float, ...] = (1.0 / 3.0, 2.0 / 3.0, 1.0)
    alpha: float = 0.05
    boundary_draws: int = 10_000
    imputations: int = 30
    sweeps: int = 10
    rules: tuple[str, ...] = ("pocock", "obf")
    modes: tuple[str, ...] = ("static", "dynamic")
    threads: int = 1

    def __post_init__(self):
        if self.time_model not in TIME_MODELS:
            raise ConfigError(f"unknown time model {self.time_model!r}")
        if self.missingness not in MISSINGNESS:
            raise ConfigError(f"unknown missingness level {self.missingness!r}")
        if self.n < 10:
            raise ConfigError("scenario needs at least 10 groups")
        if self.replicates < 1:
            raise ConfigError("need at least one replicate")
        for r in self.rules:
            if r not in ("pocock", "obf"):
                raise ConfigError(f"unknown rule {r!r}")
        for m in self.modes:
            if m not in ("static", "dynamic"):
                raise ConfigError(f"unknown mode {m!r}")

    @property
    def schedule(self) -> InterimSchedule:
        return InterimSchedule.from_fractions(self.n, self.fractions)


@dataclass
class TrialData:
    """A generated trial plus its monitoring plan.

    ``cuts`` holds per-analysis calendar cut times for staggered-entry
    trials (inf at the final analysis, meaning full follow-up); None for
    complete-data trials, where analyses simply take the first n_m groups.
    """

    dataset: LongitudinalDataset
    schedule: InterimSchedule
    time_model: str
    cuts: np.ndarray | None = None

    def interim_dataset(self, m: int) -> LongitudinalDataset:
        """The data actually visible at analysis m (arrived groups, cut applied)."""
        if not 1 <= m <= self.schedule.M:
            raise ConfigError(f"analysis {m} outside 1..{self.schedule.M}")
        snap = self.dataset.subset_groups(self.dataset.membership[:, m - 1])
        if self.cuts is not None and np.isfinite(self.cuts[m - 1]):
            late = snap.arrival_time > self.cuts[m - 1]
            if late.any():
                snap.outcome[late] = np.nan
                z_col = list(snap.covariate_names).index("Z")
                snap.covariates[late, z_col] = np.nan
                snap.observed[late] = False
        return snap


def gen_trial(
    time_model: str,
    n: int,
    coefficients: np.ndarray,
    rng: np.random.Generator,
    return_details: bool = False,
):
    """Generate one complete trial of n groups.

    Draw order (one substream): treatment, Z, latent noise, outcome uniforms.
    The latent logit of each group is its linear predictor plus MVN noise
    with kernel exp(-|t_k - t_r|), so outcomes are marginally logistic with
    serial dependence.
    """
    b = np.asarray(coefficients, dtype=float)
    t = np.asarray(TIMES)
    s = t.size
    A = rng.integers(0, 2, size=n).astype(float)
    Z = Z_MEAN + Z_SD * rng.standard_normal((n, s))
    if time_model == "continuous":
        if b.shape != (5,):
            raise ConfigError("continuous model takes 5 coefficients")
        eta = b[0] + b[1] * A[:, None] + b[2] * t[None, :] \
            + b[3] * A[:, None] * t[None, :] + b[4] * Z
    elif time_model == "discrete":
        if b.shape != (11,):
            raise ConfigError("discrete model takes 11 coefficients")
        eta = b[0] + b[1] * A[:, None] + b[2] * Z
        eta[:, 1:] += b[3:7][None, :] + A[:, None] * b[7:11][None, :]
    else:
        raise ConfigError(f"unknown time model {time_model!r}")
    kernel = np.exp(-np.abs(t[:, None] - t[None, :]))
    chol = np.linalg.cholesky(kernel)
    latent = eta + rng.standard_normal((n, s)) @ chol.T
    y = (rng.random((n, s)) < expit(latent)).astype(float)

    group_id = np.repeat(np.arange(n), s)
    ds = LongitudinalDataset(
        group_id=group_id,
        obs_time=np.tile(t, n),
        arrival_time=np.repeat(np.arange(n, dtype=float), s),
        outcome=y.ravel(),
        covariate_names=("A", "Z"),
        covariates=np.column_stack((np.repeat(A, s), Z.ravel())),
        observed=np.ones(n * s, dtype=bool),
    )
    if return_details:
        return ds, {"eta": eta, "latent": latent, "A": A, "Z": Z}
    return ds


def apply_arrival_process(
    dataset: LongitudinalDataset,
    schedule: InterimSchedule,
    rng: np.random.Generator,
):
    """Staggered entry: calendar times, recruitment pauses, analysis cuts.

    The first group's visits happen at the observation times themselves;
    later baselines follow exponential gaps (mean 1/96), with 1.25 time
    units inserted after the 85th and 185th baselines. Analysis m is cut
    when the n_m-th baseline is recorded; the final analysis waits for full
    follow-up (cut = inf). Returns (dataset with membership, cuts).
    """
    n = dataset.n_groups
    if schedule.n_final != n:
        raise ConfigError(f"schedule final count {schedule.n_final} != {n} groups")
    base = np.empty(n)
    base[0] = TIMES[0]
    base[1:] = TIMES[0] + np.cumsum(rng.exponential(ARRIVAL_MEAN_GAP, n - 1))
    for threshold in PAUSE_AFTER:
        if n > threshold:
            base[threshold:] += PAUSE_LENGTH
    offsets = np.asarray(TIMES) - TIMES[0]
    ds = dataset.copy()
    ds.arrival_time = base[ds.group_id] + np.tile(offsets, n)
    cuts = np.array([base[c - 1] for c in schedule.counts], dtype=float)
    cuts[-1] = np.inf
    ds = assign_membership_by_counts(ds, schedule.counts)
    return ds, cuts


def apply_mar_missingness(
    dataset: LongitudinalDataset, level: str, rng: np.random.Generator
) -> LongitudinalDataset:
    """Remove outcome and Z jointly, with retention probability expit(c - Z)."""
    if level not in MAR_INTERCEPTS:
        raise ConfigError(f"unknown missingness level {level!r}")
    c = MAR_INTERCEPTS[level]
    ds = dataset.copy()
    z_col = list(ds.covariate_names).index("Z")
    keep_prob = expit(c - ds.covariates[:, z_col])
    gone = rng.random(ds.n_rows) >= keep_prob
    ds.outcome[gone] = np.nan
    ds.covariates[gone, z_col] = np.nan
    ds.observed[gone] = False
    return ds


def simulate_trial(scenario: SimScenario, rep: int) -> TrialData:
    """Generate the trial for one replicate, including entry and missingness."""
    rng = substream(scenario.seed, rep, 0)
    coef = default_coefficients(scenario.time_model, scenario.effect)
    ds = gen_trial(scenario.time_model, scenario.n, coef, rng)
    schedule = scenario.schedule
    if scenario.missingness == "none":
        ds = assign_membership_by_counts(ds, schedule.counts)
        return TrialData(dataset=ds, schedule=schedule, time_model=scenario.time_model)
    ds, cuts = apply_arrival_process(ds, schedule, rng)
    ds = apply_mar_missingness(ds, scenario.missingness, rng)
    return TrialData(
        dataset=ds, schedule=schedule, time_model=scenario.time_model, cuts=cuts
    )


def _imputation_config(scenario: SimScenario, rep: int, m: int) -> ImputationConfig:
    return ImputationConfig(
        count=scenario.imputations,
        methods={"outcome": "logistic_regression", "Z": "normal_regression"},
        seed=scenario.seed,
        seed_key=(rep, 20 + m),
        sweeps=scenario.sweeps,
    )


def _replicate(scenario: SimScenario, rep: int) -> dict | None:
    """All rejection indicators for one replicate; None on numerical failure."""
    try:
        trial = simulate_trial(scenario, rep)
        schedule = trial.schedule
        M = schedule.M
        model = scenario_model(scenario.time_model)
        hyp = scenario_hypothesis(scenario.time_model)
        statistics = np.empty(M)
        compounds = []
        replaced = 0
        if scenario.missingness == "none":
            for m in range(1, M + 1):
                fit = fit_gee(trial.dataset, model, scenario.working, interim=m)
                statistics[m - 1] = wald_statistic(fit, hyp).statistic
                compounds.append(scale_blocks(fit, schedule))
        else:
            for m in range(1, M + 1):
                snap = trial.interim_dataset(m)
                pooled = impute_and_fit(
                    snap, model, scenario.working, m, _imputation_config(scenario, rep, m)
                )
                replaced += pooled.replaced
                statistics[m - 1] = pooled_wald(pooled, hyp).statistic
                compounds.append(compound_from_pooled(pooled, schedule))

        need_dynamic = "dynamic" in scenario.modes
        thresholds: dict[str, np.ndarray] = {}
        for m in range(1, M + 1):
            if m > 1 and not need_dynamic:
                break
            cfg = BoundaryConfig(
                rule="pocock",
                alpha=scenario.alpha,
                n_draws=scenario.boundary_draws,
                seed=scenario.seed,
                seed_key=(rep, 10 + m),
            )
            draws = sample_null_draws(compounds[m - 1], hyp, cfg)
            for rule in scenario.rules:
                solved = solve_tau(draws, rule, scenario.alpha)
                if m == 1 and "static" in scenario.modes:
                    thresholds[f"{rule}_static"] = np.asarray(solved.thresholds)
                if need_dynamic:
                    thresholds.setdefault(f"{rule}_dynamic", np.empty(M))[m - 1] = \
                        solved.thresholds[m - 1]

        crit = stats.chi2.ppf(1.0 - scenario.alpha, hyp.q)
        out = {"naive": bool((statistics > crit).any()), "replaced": replaced}
        for key, thr in thresholds.items():
            out[key] = bool((statistics > thr).any())
        return out
    except NumericalError:
        return None


@dataclass
class OperatingCharacteristics:
    """Aggregated rejection rates for one scenario."""

    scenario: SimScenario
    rates: dict[str, float]
    mc_se: dict[str, float]
    replicates_used: int
    failures: int
    replaced_imputations: int
    wall_seconds: float

    def to_dict(self) -> dict:
        return {
            "time_model": self.scenario.time_model,
            "n": self.scenario.n,
            "working": self.scenario.working,
            "missingness": self.scenario.missingness,
            "effect": self.scenario.effect,
            "replicates": self.scenario.replicates,
            "replicates_used": self.replicates_used,
            "failures": self.failures,
            "replaced_imputations": self.replaced_imputations,
            "seed": self.scenario.seed,
            "rates": self.rates,
            "mc_se": self.mc_se,
            "wall_seconds": self.wall_seconds,
        }


def run_operating_characteristics(scenario: SimScenario) -> OperatingCharacteristics:
    """Run every replicate and aggregate rejection rates.

    Replicates are independent substreams of the scenario seed, so any
    thread count produces identical results. Replicates that fail
    numerically are dropped; more than 2% of them failing aborts the run.
    """
    t0 = time.perf_counter()
    R = scenario.replicates
    if scenario.threads == 1:
        results = [_replicate(scenario, r) for r in range(R)]
    else:
        results = Parallel(n_jobs=scenario.threads)(
            delayed(_replicate)(scenario, r) for r in range(R)
        )
    failures = sum(1 for r in results if r is None)
    if failures > FAILURE_BUDGET * R:
        raise NumericalError(
            f"{failures} of {R} replicates failed, over the {FAILURE_BUDGET:.0%} budget"
        )
    used = [r for r in results if r is not None]
    n_used = len(used)
    keys = [k for k in used[0] if k != "replaced"] if used else []
    rates = {k: float(np.mean([u[k] for u in used])) for k in keys}
    mc_se = {
        k: float(np.sqrt(max(v * (1.0 - v), 0.0) / n_used)) for k, v in rates.items()
    }
    replaced = int(sum(u["replaced"] for u in used))
    return OperatingCharacteristics(
        scenario=scenario,
        rates=rates,
        mc_se=mc_se,
        replicates_used=n_used,
        failures=failures,
        replaced_imputations=replaced,
        wall_seconds=time.perf_counter() - t0,
    )
