"""Extrapolated sampling for stochastic samplers.

Each block is integrated deterministically (with extrapolation) and the
stochastic increment is added once, after the block.  The increment's
variance is the total variance the baseline stochastic sampler would inject
over the block's steps, scaled by ``eta ** 2``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidArgument
from .rx import RxConfig, SampleResult, sample
from .solvers import StepperSpec
from .time_grid import Block, TimeGrid
from .vector_fields import VectorField


class VarianceRule(str, enum.Enum):
    BLOCK_AGGREGATE = "block_aggregate"


@dataclass(frozen=True)
class StochasticConfig:
    eta: float = 0.0
    noise_seed: Optional[int] = 0
    variance_rule: VarianceRule = VarianceRule.BLOCK_AGGREGATE

    def __post_init__(self):
        if self.eta < 0:
            raise InvalidArgument(f"eta must be >= 0, got {self.eta}")
        object.__setattr__(self, "variance_rule", VarianceRule(self.variance_rule))


@dataclass(frozen=True)
class NoiseEvent:
    block: int
    sigma: float
    nfe_at_injection: int
    noise_norm: float

    def to_dict(self) -> dict:
        return {
            "block": self.block,
            "sigma": self.sigma,
            "nfe_at_injection": self.nfe_at_injection,
            "noise_norm": self.noise_norm,
        }


def block_sigma(field: VectorField, grid: TimeGrid, block: Block) -> float:
    """Standard deviation of the block's aggregated baseline noise."""
    var = 0.0
    for j in range(block.start_index, block.end_index, -1):
        var += field.step_variance(grid.t(j), grid.t(j - 1))
    return float(np.sqrt(var))


def sample_stochastic(
    field: VectorField,
    grid: TimeGrid,
    stepper: StepperSpec,
    rx_config: RxConfig | None,
    stoch_config: StochasticConfig,
    x_T=None,
    seed: int | None = None,
    batch: int = 1,
) -> SampleResult:
    if stoch_config.eta < 0:
        raise InvalidArgument("eta must be >= 0")
    rng = np.random.default_rng(stoch_config.noise_seed)
    events = []

    def inject(n, block, x, ledger):
        sigma = block_sigma(field, grid, block)
        if stoch_config.eta == 0:
            return x
        xi = rng.standard_normal(np.shape(x))
        noise = (stoch_config.eta * sigma) * xi
        events.append(NoiseEvent(n, sigma, ledger.count, float(np.linalg.norm(noise))))
        return x + noise

    result = sample(field, grid, stepper, rx_config, x_T=x_T, seed=seed, batch=batch, after_block=inject)
    result.noise_events = events
    return result


def endpoint_noise_variance(field: VectorField, grid: TimeGrid, rx_config: RxConfig, eta: float) -> float:
    """``eta^2 * sum_blocks sigma_block^2``: endpoint variance for the zero field."""
    schedule = rx_config.schedule(grid)
    return eta * eta * sum(block_sigma(field, grid, b) ** 2 for b in schedule.blocks)
