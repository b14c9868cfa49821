"""Time discretizations, extrapolation blocks and grid-aware weights.

Grids are stored in sampling order, ``times[0] = t_N`` (largest) down to
``times[-1] = t_0``.  Grid indices used throughout the package follow the
``t_i`` convention, so ``grid.t(i)`` is ``times[N - i]``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidArgument


class VariableKind(str, enum.Enum):
    PHYSICAL_T = "physical_t"
    DDIM_GAMMA = "ddim_gamma"


class TailPolicy(str, enum.Enum):
    SKIP_EXTRAPOLATION = "skip_extrapolation"
    ADJUST_K = "adjust_k"


@dataclass(frozen=True)
class TimeGrid:
    times: tuple[float, ...]
    variable_kind: VariableKind = VariableKind.PHYSICAL_T

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "variable_kind", VariableKind(self.variable_kind))
        if len(times) < 2:
            raise InvalidArgument("a grid needs at least two time points")
        if not all(math.isfinite(t) for t in times):
            raise InvalidArgument("grid times must be finite")
        gaps = np.diff(np.asarray(times))
        if not np.all(gaps < 0):
            raise InvalidArgument("grid times must be strictly decreasing")
        if times[-1] < 0:
            raise InvalidArgument("grid times must be nonnegative")

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def T(self) -> float:
        return self.times[0]

    @property
    def t_end(self) -> float:
        return self.times[-1]

    def t(self, i: int) -> float:
        """Time ``t_i``; ``t(N)`` is the start of sampling, ``t(0)`` the end."""
        if not 0 <= i <= self.n_steps:
            raise IndexError(f"grid index {i} outside [0, {self.n_steps}]")
        return self.times[self.n_steps - i]

    def to_dict(self) -> dict:
        return {"variable_kind": self.variable_kind.value, "times": list(self.times)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data) -> "TimeGrid":
        # a bare array is accepted as a physical-time grid
        if isinstance(data, (list, tuple)):
            return cls(tuple(data))
        try:
            times = data["times"]
        except (KeyError, TypeError):
            raise InvalidArgument("grid JSON needs a 'times' array") from None
        return cls(tuple(times), VariableKind(data.get("variable_kind", "physical_t")))

    @classmethod
    def from_json(cls, text: str) -> "TimeGrid":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Block:
    """``k`` consecutive fine steps from ``t_i`` down to ``t_{i-k}``."""

    start_index: int
    k: int
    h: float
    lambdas: tuple[float, ...]

    @property
    def end_index(self) -> int:
        return self.start_index - self.k


@dataclass(frozen=True)
class BlockSchedule:
    blocks: tuple[Block, ...]
    tail_policy: TailPolicy
    method_mask: tuple[bool, ...] = field(default=())

    def __len__(self):
        return len(self.blocks)

    @property
    def extrapolated_blocks(self) -> list[int]:
        return [n for n, on in enumerate(self.method_mask) if on]


def build_uniform_grid(T: float, N: int) -> TimeGrid:
    if not T > 0:
        raise InvalidArgument(f"T must be positive, got {T}")
    if int(N) != N or N < 1:
        raise InvalidArgument(f"N must be a positive integer, got {N}")
    N = int(N)
    return TimeGrid(tuple(T * i / N for i in range(N, -1, -1)))


def build_power_grid(T: float, t_min: float, N: int, rho: float) -> TimeGrid:
    """EDM-style schedule, dense near ``t_min`` for large ``rho``."""
    if rho < 1:
        raise InvalidArgument(f"rho must be >= 1, got {rho}")
    if not T > t_min >= 0:
        raise InvalidArgument(f"need T > t_min >= 0, got T={T}, t_min={t_min}")
    if int(N) != N or N < 1:
        raise InvalidArgument(f"N must be a positive integer, got {N}")
    N = int(N)
    lo, hi = t_min ** (1.0 / rho), T ** (1.0 / rho)
    times = [(lo + (i / N) * (hi - lo)) ** rho for i in range(N, -1, -1)]
    times[0] = float(T)
    if t_min == 0:
        times[-1] = 0.0
    return TimeGrid(tuple(times))


def compute_lambdas(grid: TimeGrid, start_index: int, k: int) -> Block:
    if k < 1:
        raise InvalidArgument(f"k must be >= 1, got {k}")
    if k > start_index or start_index > grid.n_steps:
        raise IndexError(f"block of {k} steps from index {start_index} leaves the grid")
    i = start_index
    h = grid.t(i) - grid.t(i - k)
    lambdas = tuple((grid.t(i - j + 1) - grid.t(i - j)) / h for j in range(1, k + 1))
    return Block(start_index=i, k=k, h=h, lambdas=lambdas)


def partition_blocks(
    grid: TimeGrid,
    k: int,
    tail_policy: TailPolicy | str = TailPolicy.SKIP_EXTRAPOLATION,
    method_mask: Sequence[bool] | None = None,
) -> BlockSchedule:
    """Tile the grid into blocks of ``k`` steps starting from ``t_N``.

    The final ``N mod k`` steps form a shorter tail block.  Under
    ``skip_extrapolation`` it is never extrapolated; under ``adjust_k`` it is
    extrapolated with its own weights when it still has at least two steps.
    ``method_mask`` covers every block, tail included, and is combined with
    the tail rule.
    """
    if k < 2:
        raise InvalidArgument(f"block size k must be >= 2, got {k}")
    tail_policy = TailPolicy(tail_policy)
    N = grid.n_steps
    blocks = []
    i = N
    while i >= k:
        blocks.append(compute_lambdas(grid, i, k))
        i -= k
    has_tail = i > 0
    if has_tail:
        blocks.append(compute_lambdas(grid, i, i))

    if method_mask is None:
        mask = [True] * len(blocks)
    else:
        mask = [bool(m) for m in method_mask]
        if len(mask) != len(blocks):
            raise InvalidArgument(
                f"method_mask has {len(mask)} entries for {len(blocks)} blocks"
            )
    if has_tail:
        tail_ok = tail_policy is TailPolicy.ADJUST_K and blocks[-1].k >= 2
        mask[-1] = mask[-1] and tail_ok
    return BlockSchedule(tuple(blocks), tail_policy, tuple(mask))


def count_blocks(N: int, k: int) -> int:
    return N // k + (1 if N % k else 0)


def mask_from_spec(spec: str | Iterable[bool], n_blocks: int) -> list[bool]:
    """Build a hybrid-schedule mask.

    Accepted forms: ``"all"``, ``"none"``, ``"last:m"`` (last m blocks
    extrapolated), ``"first:m"`` (first m blocks plain, rest extrapolated),
    ``"middle:m"`` (m central blocks extrapolated) or an explicit list of
    booleans / 0-1 values.
    """
    if not isinstance(spec, str):
        mask = [bool(v) for v in spec]
        if len(mask) > n_blocks:
            raise InvalidArgument(f"mask of length {len(mask)} exceeds {n_blocks} blocks")
        if len(mask) < n_blocks:
            raise InvalidArgument(f"mask of length {len(mask)} does not cover {n_blocks} blocks")
        return mask
    if spec == "all":
        return [True] * n_blocks
    if spec == "none":
        return [False] * n_blocks
    kind, _, num = spec.partition(":")
    try:
        m = int(num)
    except ValueError:
        raise InvalidArgument(f"cannot parse mask spec {spec!r}") from None
    if m < 0 or m > n_blocks:
        raise InvalidArgument(f"mask spec {spec!r} does not fit {n_blocks} blocks")
    if kind == "last":
        return [n >= n_blocks - m for n in range(n_blocks)]
    if kind == "first":
        return [n >= m for n in range(n_blocks)]
    if kind == "middle":
        lo = (n_blocks - m) // 2
        return [lo <= n < lo + m for n in range(n_blocks)]
    raise InvalidArgument(f"unknown mask kind {kind!r}")


def gamma_from_alpha(alpha):
    alpha = np.asarray(alpha, dtype=np.float64)
    # (1 - a)(1 + a) avoids cancellation in 1 - a^2 near a = 1
    return np.sqrt((1.0 - alpha) * (1.0 + alpha)) / alpha


def alpha_from_gamma(gamma):
    gamma = np.asarray(gamma, dtype=np.float64)
    return 1.0 / np.sqrt(1.0 + gamma**2)


def to_gamma_grid(alpha_values: Sequence[float]) -> TimeGrid:
    """Map VP signal levels (ordered noise end first) to a DDIM gamma grid."""
    alphas = np.asarray(alpha_values, dtype=np.float64)
    if alphas.ndim != 1 or alphas.size < 2:
        raise InvalidArgument("need at least two alpha values")
    if not np.all((alphas > 0) & (alphas <= 1)):
        raise InvalidArgument("alpha values must lie in (0, 1]")
    gammas = gamma_from_alpha(alphas)
    if not np.all(np.diff(gammas) < 0):
        raise InvalidArgument("gamma values must be strictly decreasing")
    return TimeGrid(tuple(gammas.tolist()), VariableKind.DDIM_GAMMA)


def vp_linear_alphas(N: int, beta_min: float = 0.1, beta_max: float = 20.0, eps: float = 1e-3):
    """Signal levels of the continuous linear-beta VP process on uniform t in [eps, 1]."""
    ts = np.linspace(1.0, eps, N + 1)
    log_alpha = -0.25 * ts**2 * (beta_max - beta_min) - 0.5 * ts * beta_min
    return np.exp(log_alpha)
