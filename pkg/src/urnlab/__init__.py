"""urnlab: simulation and statistical verification of urn schemes with innovation."""

from .measures import (
    AtomicMeasure,
    ConstantFunction,
    CountingMeasure,
    DensityMeasure,
    FiniteColors,
    FuncTestFunction,
    PiecewisePolynomial,
    ProductSpace,
    TagFunction,
    TestFunction,
    UnitInterval,
    integrate,
    measure_integrate,
    normalize,
)
from .kernels import (
    CallableKernel,
    Replacement,
    ReplacementKernel,
    SimonKernel,
    TableKernel,
    builtin_finite,
    builtin_simon,
    sample_replacement,
    validate_assumptions,
)
from .spectral import (
    CovarianceForm,
    SpectralConstants,
    apply_R,
    bridge_covariance,
    limit_covariance,
    sigma_sq,
    spectral_constants,
)
from .engine import CheckpointGrid, Trajectory, UrnEngine, replica_streams

__version__ = "0.1.0"
