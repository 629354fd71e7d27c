"""Finite-step invariant sets for return maps, with holdout PAC certificates."""

from .algorithm import (
    CollapseError,
    KStepRecord,
    RbfOptions,
    RunHistory,
    RunResult,
    SampleBatch,
    partition,
    run,
    verify_k_step,
)
from .ellipsoid import DegenerateCloudWarning, Ellipsoid, mvee, unit_ball_volume
from .hybrid import (
    DEFAULT_INTEGRATION,
    FiniteDifferenceWarning,
    GuardNotReached,
    HybridSystemDefinition,
    ImmediateReimpact,
    IntegrationOptions,
    InvalidSectionPoint,
    NoConvergence,
    PoincareEvaluationError,
    PoincareMap,
    UnstableLinearization,
    contraction_init,
    fd_jacobian,
    find_fixed_point,
    integrate_to_guard,
    poincare_step,
    spectral_radius,
)
from .pac import PacCertificate, binomial_cdf, binomial_tail_inversion, certify
from .rbf import GAMMA_BALL, RbfSamplingError, RBFSet, fit_rbf, sample_uniform_rbf

__all__ = [
    "CollapseError",
    "DEFAULT_INTEGRATION",
    "DegenerateCloudWarning",
    "Ellipsoid",
    "FiniteDifferenceWarning",
    "GAMMA_BALL",
    "GuardNotReached",
    "HybridSystemDefinition",
    "ImmediateReimpact",
    "IntegrationOptions",
    "InvalidSectionPoint",
    "KStepRecord",
    "NoConvergence",
    "PacCertificate",
    "PoincareEvaluationError",
    "PoincareMap",
    "RBFSet",
    "RbfOptions",
    "RbfSamplingError",
    "RunHistory",
    "RunResult",
    "SampleBatch",
    "UnstableLinearization",
    "binomial_cdf",
    "binomial_tail_inversion",
    "certify",
    "contraction_init",
    "fd_jacobian",
    "find_fixed_point",
    "fit_rbf",
    "integrate_to_guard",
    "mvee",
    "partition",
    "poincare_step",
    "run",
    "sample_uniform_rbf",
    "spectral_radius",
    "unit_ball_volume",
    "verify_k_step",
]

__version__ = "0.1.0"
