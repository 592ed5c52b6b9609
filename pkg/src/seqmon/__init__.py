"""Group-sequential monitoring for marginal regression models.

The pieces fit together in a pipeline:

- :mod:`seqmon.datasets` holds long-format longitudinal data and interim
  membership,
- :mod:`seqmon.gee` fits marginal models with working correlation and
  sandwich covariance,
- :mod:`seqmon.seqcov` assembles the joint covariance of the estimates
  across analyses,
- :mod:`seqmon.hypotheses` forms Wald statistics for linear or smooth
  restrictions,
- :mod:`seqmon.boundaries` calibrates Monte Carlo stopping thresholds,
- :mod:`seqmon.imputation` handles missing data by chained-equation
  imputation with combining rules,
- :mod:`seqmon.simulate` reproduces the operating-characteristics studies,
- :mod:`seqmon.cli` wires it all into a command-line tool.
"""

__version__ = "0.1.0"

from .boundaries import (
    BoundaryConfig,
    BoundaryResult,
    Decision,
    NullDraws,
    compute_boundary,
    dynamic_boundary,
    empirical_boundary_value,
    interim_decision,
    sample_null_draws,
    solve_tau,
)
from .datasets import (
    LongitudinalDataset,
    assign_membership_by_counts,
    assign_membership_by_times,
    read_dataset_csv,
    write_dataset_csv,
)
from .exceptions import (
    ConfigError,
    ConvergenceError,
    DataError,
    NumericalError,
    SeparationError,
    SeqmonError,
    SingularMatrixError,
)
from .gee import (
    GeeFit,
    ModelSpec,
    TimeFactor,
    WorkingCorrelation,
    correlation_matrix,
    estimate_association,
    expand_design,
    fit_gee,
)
from .hypotheses import (
    HypothesisSpec,
    WaldResult,
    builtin_hypothesis,
    reference_pvalue,
    wald_statistic,
)
from .imputation import (
    ImputationConfig,
    PooledFit,
    compound_from_pooled,
    impute_and_fit,
    impute_chained,
    pooled_wald,
    rubin_pool,
)
from .rng import substream
from .seqcov import (
    CompoundCovariance,
    InterimSchedule,
    direct_compound_estimate,
    marginal_covariance,
    scale_blocks,
)
from .simulate import (
    OperatingCharacteristics,
    SimScenario,
    TrialData,
    apply_arrival_process,
    apply_mar_missingness,
    gen_trial,
    run_operating_characteristics,
    simulate_trial,
)

__all__ = [
    "__version__",
    "BoundaryConfig",
    "BoundaryResult",
    "CompoundCovariance",
    "ConfigError",
    "ConvergenceError",
    "DataError",
    "Decision",
    "GeeFit",
    "HypothesisSpec",
    "ImputationConfig",
    "InterimSchedule",
    "LongitudinalDataset",
    "ModelSpec",
    "NullDraws",
    "NumericalError",
    "OperatingCharacteristics",
    "PooledFit",
    "SeparationError",
    "SeqmonError",
    "SimScenario",
    "SingularMatrixError",
    "TimeFactor",
    "TrialData",
    "WaldResult",
    "WorkingCorrelation",
    "apply_arrival_process",
    "apply_mar_missingness",
    "assign_membership_by_counts",
    "assign_membership_by_times",
    "builtin_hypothesis",
    "compound_from_pooled",
    "compute_boundary",
    "correlation_matrix",
    "direct_compound_estimate",
    "dynamic_boundary",
    "empirical_boundary_value",
    "estimate_association",
    "expand_design",
    "fit_gee",
    "gen_trial",
    "impute_and_fit",
    "impute_chained",
    "interim_decision",
    "marginal_covariance",
    "pooled_wald",
    "read_dataset_csv",
    "reference_pvalue",
    "rubin_pool",
    "run_operating_characteristics",
    "sample_null_draws",
    "scale_blocks",
    "simulate_trial",
    "solve_tau",
    "substream",
    "wald_statistic",
    "write_dataset_csv",
]
