"""Grid-aware Richardson extrapolation every k steps of a baseline sampler.

Each block runs the baseline for ``k`` fine steps from ``t_i`` to
``t_{i-k}``, rebuilds a single coarse step over the same interval from
evaluations the fine track already stored, and combines the two as::

    x = (fine - S * coarse) / (1 - S),   S = sum_j lambda_j ** p

The extrapolated state becomes the initial condition of the next block.
No field evaluations beyond the baseline's are spent.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    DegenerateExtrapolation,
    InvalidArgument,
    NumericalFailure,
    PreconditionViolation,
    UnsupportedOperation,
)
from .solvers import (
    EvalRecord,
    NfeLedger,
    RecordTag,
    StepperKind,
    StepperSpec,
    ab_combination,
    adams_bashforth_step,
    check_uniform_history,
    euler_step,
    heun_step,
    rk2_step,
)
from .time_grid import (
    Block,
    BlockSchedule,
    TailPolicy,
    TimeGrid,
    count_blocks,
    mask_from_spec,
    partition_blocks,
)
from .vector_fields import VectorField

log = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-9


class RxMode(str, enum.Enum):
    RX_GRID_AWARE = "rx_grid_aware"
    NAIVE_RICHARDSON = "naive_richardson"
    BASELINE_ONLY = "baseline_only"


@dataclass(frozen=True)
class RxConfig:
    """``method_mask`` is None (all blocks), a mask spec string such as
    ``"last:2"``, or an explicit per-block boolean sequence."""

    k: int = 2
    p: Optional[int] = None
    mode: RxMode = RxMode.RX_GRID_AWARE
    tail_policy: TailPolicy = TailPolicy.SKIP_EXTRAPOLATION
    method_mask: object = None

    def __post_init__(self):
        object.__setattr__(self, "mode", RxMode(self.mode))
        object.__setattr__(self, "tail_policy", TailPolicy(self.tail_policy))
        if self.mode is not RxMode.BASELINE_ONLY and self.k < 2:
            raise InvalidArgument(f"k must be >= 2 for extrapolation, got {self.k}")
        if self.p is not None and self.p < 2:
            raise InvalidArgument(f"p must be >= 2, got {self.p}")
        if isinstance(self.method_mask, list):
            object.__setattr__(self, "method_mask", tuple(self.method_mask))

    def exponent(self, stepper: StepperSpec) -> int:
        return self.p if self.p is not None else stepper.local_order_p

    def schedule(self, grid: TimeGrid) -> BlockSchedule:
        k = max(self.k, 2)
        mask = self.method_mask
        if mask is not None:
            mask = mask_from_spec(mask, count_blocks(grid.n_steps, k))
        return partition_blocks(grid, k, self.tail_policy, mask)


@dataclass
class RxBlockState:
    x_entry: np.ndarray
    block: Block
    fine_estimate: Optional[np.ndarray] = None
    coarse_estimate: Optional[np.ndarray] = None
    stored_evals: list = field(default_factory=list)
    nfe_fine: int = 0
    nfe_coarse: int = 0

    @property
    def lambdas(self):
        return self.block.lambdas


@dataclass
class BlockReport:
    index: int
    start_index: int
    k: int
    extrapolated: bool
    nfe: int
    fallback_reason: Optional[str] = None

    def to_dict(self) -> dict:
        d = {"index": self.index, "extrapolated": self.extrapolated}
        if self.fallback_reason is not None:
            d["fallback_reason"] = self.fallback_reason
        return d


@dataclass
class SampleResult:
    x0: np.ndarray
    nfe: int
    blocks: list
    bootstrap_steps: int = 0
    noise_events: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "nfe": self.nfe,
            "endpoint": np.asarray(self.x0).tolist(),
            "per_block": [b.to_dict() for b in self.blocks],
        }
        if self.bootstrap_steps:
            d["bootstrap_steps"] = self.bootstrap_steps
        return d


# extrapolation formulas ----------------------------------------------------


def extrapolation_weight(lambdas: Sequence[float], p: float) -> float:
    """``S / (1 - S)`` with ``S = sum(lambda**p)``; the fine/coarse gap multiplier."""
    s = float(sum(lam**p for lam in lambdas))
    den = 1.0 - s
    if abs(den) <= DEGENERATE_TOL:
        raise DegenerateExtrapolation(f"1 - sum(lambda^p) = {den:.3e} is degenerate")
    return s / den


def extrapolate(fine, coarse, lambdas: Sequence[float], p: float):
    """Grid-aware combination ``(fine - S coarse) / (1 - S)``.

    Evaluated as ``fine + S/(1-S) * (fine - coarse)`` so that equal inputs
    are returned unchanged bit for bit.
    """
    w = extrapolation_weight(lambdas, p)
    return fine + w * (fine - coarse)


def classical_richardson(fine, coarse, k: int, p_global: float):
    """Fixed-coefficient Richardson ``(k^p fine - coarse) / (k^p - 1)``."""
    if k < 2:
        raise InvalidArgument("k must be >= 2")
    if p_global < 1:
        raise InvalidArgument("p_global must be >= 1")
    kp = float(k) ** p_global
    return fine + (fine - coarse) / (kp - 1.0)


# coarse tracks --------------------------------------------------------------


def coarse_step_euler(state: RxBlockState, grid: TimeGrid):
    rec = state.stored_evals[0] if state.stored_evals else None
    t_i = grid.t(state.block.start_index)
    if rec is None or rec.time != t_i:
        raise AssertionError("missing block-entry evaluation for the coarse Euler step")
    t_end = grid.t(state.block.end_index)
    return state.x_entry + (t_end - t_i) * rec.value


def select_delta_record(candidates: Sequence[EvalRecord], target: float) -> EvalRecord:
    """Stored record nearest ``target`` in time; ties go to the larger time."""
    return min(candidates, key=lambda r: (abs(r.time - target), -r.time))


def coarse_step_rk2(state: RxBlockState, spec: StepperSpec, grid: TimeGrid):
    """Coarse two-stage step over a k=2 block from stored slopes.

    Uses the block-entry slope and, for the delta point, whichever of the
    second fine step's two slopes lies nearest in time.
    """
    block = state.block
    if block.k != 2:
        raise UnsupportedOperation(f"rk2 coarse step requires k=2, got k={block.k}")
    t_i, t_end = grid.t(block.start_index), grid.t(block.end_index)
    z_i = state.stored_evals[0]
    target = t_i + spec.delta * (t_end - t_i)
    z_sel = select_delta_record(state.stored_evals[2:4], target)
    return state.x_entry - (t_i - t_end) * (spec.a1 * z_i.value + spec.a2 * z_sel.value)


def coarse_step_ab(
    x_entry,
    evals_by_index: dict,
    start_index: int,
    k: int,
    grid: TimeGrid,
    spec: StepperSpec,
):
    """Adams-Bashforth step of width ``t_i - t_{i-k}`` using evaluations at
    ``t_i, t_{i+k}, ..., t_{i+sk}`` stored by earlier fine steps."""
    idx = [start_index + j * k for j in range(len(spec.b))]
    missing = [j for j in idx if j not in evals_by_index]
    if missing:
        raise PreconditionViolation("insufficient stride history")
    recs = [evals_by_index[j] for j in idx]
    t_i, t_end = grid.t(start_index), grid.t(start_index - k)
    if not spec.allow_nonuniform and not check_uniform_history([r.time for r in recs], t_end - t_i):
        raise PreconditionViolation("non-uniform stride history")
    return x_entry + (t_end - t_i) * ab_combination(spec.b, [r.value for r in recs])


# block runner ----------------------------------------------------------------


def _fine_track(field, stepper, grid, block, x, ledger, state, evals_by_index):
    bootstrap = 0
    for j in range(block.start_index, block.end_index, -1):
        t_from, t_to = grid.t(j), grid.t(j - 1)
        if stepper.kind is StepperKind.EULER:
            x, rec = euler_step(field, x, t_from, t_to, ledger)
            recs = [rec]
        elif stepper.kind is StepperKind.HEUN:
            x, recs = heun_step(field, x, t_from, t_to, ledger)
        elif stepper.kind is StepperKind.RK2:
            x, recs = rk2_step(field, x, t_from, t_to, stepper, ledger)
        else:
            past = [evals_by_index.get(j + m) for m in range(1, stepper.n_history + 1)]
            if all(r is not None for r in past):
                x, recs = adams_bashforth_step(
                    field, x, past, t_from, t_to, stepper.b, ledger, stepper.allow_nonuniform
                )
            else:
                # warm-up with a lower-order step until enough history exists
                x, rec = euler_step(field, x, t_from, t_to, ledger)
                recs = [EvalRecord(rec.time, rec.state, rec.value, RecordTag.HISTORY)]
                bootstrap += 1
        if evals_by_index is not None:
            evals_by_index[j] = recs[0]
        state.stored_evals.extend(recs)
    return x, bootstrap


def run_block(
    field: VectorField,
    stepper: StepperSpec,
    block: Block,
    x_entry,
    ledger: NfeLedger,
    config: RxConfig,
    grid: TimeGrid,
    *,
    extrapolate_block: bool = True,
    evals_by_index: dict | None = None,
    index: int = 0,
):
    """Run one block; returns ``(x_out, state, report, bootstrap_steps)``.

    ``evals_by_index`` carries per-grid-point evaluations across blocks; it
    is required for Adams-Bashforth.
    """
    if stepper.kind is StepperKind.ADAMS_BASHFORTH and evals_by_index is None:
        evals_by_index = {}
    state = RxBlockState(x_entry=x_entry, block=block)
    n0 = ledger.count
    fine, bootstrap = _fine_track(field, stepper, grid, block, x_entry, ledger, state, evals_by_index)
    state.fine_estimate = fine
    state.nfe_fine = ledger.count - n0

    report = BlockReport(index, block.start_index, block.k, False, state.nfe_fine)
    if not extrapolate_block or config.mode is RxMode.BASELINE_ONLY or block.k < 2:
        return fine, state, report, bootstrap

    n1 = ledger.count
    try:
        if stepper.kind is StepperKind.EULER:
            coarse = coarse_step_euler(state, grid)
        elif stepper.kind is StepperKind.ADAMS_BASHFORTH:
            coarse = coarse_step_ab(x_entry, evals_by_index, block.start_index, block.k, grid, stepper)
        else:
            coarse = coarse_step_rk2(state, stepper, grid)
    except (PreconditionViolation, UnsupportedOperation) as exc:
        report.fallback_reason = str(exc)
        log.info("block %d: extrapolation skipped (%s)", index, exc)
        return fine, state, report, bootstrap
    state.coarse_estimate = coarse
    state.nfe_coarse = ledger.count - n1
    if state.nfe_coarse:
        raise AssertionError("coarse track evaluated the field")

    p = config.exponent(stepper)
    try:
        if config.mode is RxMode.NAIVE_RICHARDSON:
            x_out = classical_richardson(fine, coarse, block.k, p - 1)
        else:
            x_out = extrapolate(fine, coarse, block.lambdas, p)
    except DegenerateExtrapolation as exc:
        report.fallback_reason = f"degenerate extrapolation: {exc}"
        log.warning("block %d: %s; keeping the fine estimate", index, exc)
        return fine, state, report, bootstrap
    report.extrapolated = True
    return x_out, state, report, bootstrap


def sample(
    field: VectorField,
    grid: TimeGrid,
    stepper: StepperSpec,
    config: RxConfig | None = None,
    x_T=None,
    seed: int | None = None,
    batch: int = 1,
    after_block: Callable | None = None,
) -> SampleResult:
    """Integrate from ``grid.T`` to ``grid.t_end`` with block-wise extrapolation.

    When ``x_T`` is omitted it is drawn from the field's prior with
    ``numpy.random.default_rng(seed)``.  ``after_block(n, block, x, ledger)``
    may transform the state between blocks (the SDE bridge hooks in here).
    """
    config = config or RxConfig()
    if field.variable_kind is not grid.variable_kind:
        raise InvalidArgument(
            f"field steps in {field.variable_kind.value} but grid is {grid.variable_kind.value}"
        )
    if x_T is None:
        x_T = field.sample_prior(np.random.default_rng(seed), grid.T, batch)
    x = np.asarray(x_T, dtype=np.float64)

    schedule = config.schedule(grid)
    ledger = NfeLedger()
    evals_by_index = {} if stepper.kind is StepperKind.ADAMS_BASHFORTH else None
    reports = []
    bootstrap_total = 0
    for n, block in enumerate(schedule.blocks):
        try:
            x, _, report, boot = run_block(
                field,
                stepper,
                block,
                x,
                ledger,
                config,
                grid,
                extrapolate_block=schedule.method_mask[n],
                evals_by_index=evals_by_index,
                index=n,
            )
        except NumericalFailure as exc:
            raise NumericalFailure(f"block {n}: {exc}") from exc
        if not np.all(np.isfinite(x)):
            raise NumericalFailure(f"block {n}: non-finite state after extrapolation")
        bootstrap_total += boot
        reports.append(report)
        if after_block is not None:
            x = after_block(n, block, x, ledger)
    return SampleResult(x, ledger.count, reports, bootstrap_total)
