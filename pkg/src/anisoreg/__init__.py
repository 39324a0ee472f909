"""Multiview point-cloud registration under known anisotropic localization noise."""

from .core import (
    AnisoregError,
    DegenerateConfiguration,
    GmmModel,
    InsufficientPoints,
    LengthMismatch,
    Mode,
    NotARotation,
    NotPSD,
    ObservedCloud,
    ParseError,
    RegistrationConfig,
    RigidTransform,
    Schedule,
    SingularCovariance,
    TooFewPoints,
    ValidationError,
    validate_rotation,
)
from .engine import RegistrationResult, best_of_restarts, run_registration
from .metrics import pairwise_error
from .procrustes import weighted_procrustes
from .simulation import (
    AcquisitionSpec,
    generate_centriole,
    generate_triplets,
    perturb_rotations,
    simulate_views,
)

__version__ = "0.1.0"
