"""Score-driven filtering and smoothing for nonlinear non-Gaussian state-space models."""

from .lgss import (
    FilterRun,
    GaussianState,
    SmootherRun,
    SystemMatrices,
    kalman_filter,
    kalman_filter_score_form,
    kalman_smoother,
    kalman_smoother_score_form,
    stationary_state,
)
from .models import (
    GaussianScale,
    LinearGaussianObservation,
    PoissonDuration,
    StudentTLocation,
    StudentTScale,
    TwoComponentSV,
    TwoComponentSvParams,
    design,
    simulate_ssm,
    two_component_signal,
)
from .errors import (
    ConfigError,
    EstimationFailure,
    ExperimentAborted,
    IdentificationError,
    InternalInvariantError,
    InvalidInputError,
    InvalidParameterError,
    NumericalFailureError,
    ParticleDegeneracyError,
    PriorDomainError,
    SdFilterError,
    SingularInnovationError,
)
from .estimation import FitConfig, FitResult, ParameterVector, fit, numerical_hessian
from .oracle_harness import (
    ExperimentConfig,
    ExperimentReport,
    error_scaling,
    fit_particle_likelihood,
    run_experiment,
    timing_comparison,
)
from .particles import ParticleCloud, particle_filter, particle_smoother
from .score_engine import (
    KalmanConsistent,
    ScaledScore,
    SdFilterRun,
    TransitionSpec,
    sd_filter,
    sd_loglik,
    sd_smoother,
)
from .uncertainty import (
    BandSeries,
    BandSpec,
    bands_combined,
    bands_filtering_only,
    bands_parameter_only,
    coverage_rate,
    parameter_ensemble,
)

__version__ = "0.1.0"
