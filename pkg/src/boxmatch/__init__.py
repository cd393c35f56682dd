"""Interpretable study populations, optimal full matching, and worst-case
randomization inference for binary outcomes."""

from .dataset import Dataset, LoadError, Schema, filter_to_box, impute_with_indicators, load_csv
from .inference import (
    InferenceReport,
    StratumCompletion,
    StratumObservation,
    VarianceGrid,
    WorstCaseResult,
    enumerate_null_variance_oracle,
    eq1_variance,
    estimate_ate,
    max_variance_dp,
    simulate_randomization,
    stratum_options,
    test_and_invert,
)
from .matching import (
    BalanceReport,
    DistanceMatrix,
    MatchError,
    Stratification,
    apply_caliper,
    full_match,
    rank_mahalanobis,
    standardized_differences,
)
from .maxbox import Box, BoxResult, MaxBoxInfeasibleError, box_contains, brute_force_max_box, maximal_box
from .propensity import (
    FitError,
    LogisticModel,
    SeparationError,
    SupportFlags,
    crump_flags,
    dehejia_wahba_flags,
    fit_logistic,
    mark_support,
)
from .synthetic import SyntheticTruth, generate_cohort, generate_experiment

__version__ = "0.1.0"
