"""Coupling-based upper bounds and moment-based lower bounds on Wasserstein distances."""

__version__ = "0.1.0"

from .errors import (
    ApproximationFailedError,
    ChainStepError,
    ContractionNotDetectedError,
    InvalidInputError,
    NumericalFailureError,
    StepSizeTooLargeError,
)
from .metrics import EstimatorConfig, Metric, TrajectoryBatch, distance, pairwise_cost_matrix
from .estimators import (
    BoundReport,
    DobsonReport,
    analytic_panel,
    combined_lower_bound,
    cub,
    cub_instant,
    dobson_bound,
    lower_bound_gelbrich,
    lower_bound_marginal,
)
from .ot import SinkhornConfig, TransportResult, brute_force_wp, empirical_wp_mean, exact_empirical_wp, sinkhorn
