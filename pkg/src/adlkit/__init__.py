"""Adaptive Langevin sampling toolkit: integrators, Hermite Galerkin analysis,
replica-ensemble estimators and experiment drivers."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    DynamicsParams,
    Form,
    RngStream,
    SamplerState,
    friction_convert,
    normalize_params,
    rng_derive,
)
from .errors import (  # noqa: E402
    AdlError,
    ConfigError,
    DataError,
    NumericalError,
)

__all__ = [
    "DynamicsParams",
    "Form",
    "RngStream",
    "SamplerState",
    "friction_convert",
    "normalize_params",
    "rng_derive",
    "AdlError",
    "ConfigError",
    "DataError",
    "NumericalError",
    "__version__",
]
