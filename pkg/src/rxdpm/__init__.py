"""Richardson-extrapolated ODE samplers for diffusion models (RX-DPM)."""

from .errors import (
    ConfigError,
    DegenerateExtrapolation,
    InvalidArgument,
    NumericalFailure,
    PreconditionViolation,
    RxError,
    UnsupportedOperation,
)
from .rx import RxConfig, RxMode, classical_richardson, extrapolate, run_block, sample
from .sde import StochasticConfig, sample_stochastic
from .solvers import NfeLedger, StepperSpec, adams_bashforth, euler, heun, midpoint, rk2
from .time_grid import (
    TailPolicy,
    TimeGrid,
    VariableKind,
    build_power_grid,
    build_uniform_grid,
    compute_lambdas,
    partition_blocks,
    to_gamma_grid,
)
from .vector_fields import (
    VectorField,
    ddim_gamma_field,
    gaussian_flow_field,
    gaussian_mixture_field,
    reference_endpoint,
)

__all__ = [
    "ConfigError",
    "DegenerateExtrapolation",
    "InvalidArgument",
    "NfeLedger",
    "NumericalFailure",
    "PreconditionViolation",
    "RxConfig",
    "RxError",
    "RxMode",
    "StepperSpec",
    "StochasticConfig",
    "TailPolicy",
    "TimeGrid",
    "UnsupportedOperation",
    "VariableKind",
    "VectorField",
    "adams_bashforth",
    "build_power_grid",
    "build_uniform_grid",
    "classical_richardson",
    "compute_lambdas",
    "ddim_gamma_field",
    "euler",
    "extrapolate",
    "gaussian_flow_field",
    "gaussian_mixture_field",
    "heun",
    "midpoint",
    "partition_blocks",
    "reference_endpoint",
    "rk2",
    "run_block",
    "sample",
    "sample_stochastic",
    "to_gamma_grid",
]
