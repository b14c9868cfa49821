"""Baseline ODE steppers with NFE accounting and evaluation records.

Every field evaluation goes through :meth:`NfeLedger.evaluate`, so the
ledger count is the exact cost of a run.  Steppers return the
:class:`EvalRecord` objects they produced; the extrapolation layer reuses
them to build its coarse estimate without calling the field again.

Steps are signed: ``t_to - t_from`` is negative when sampling backwards.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, NumericalFailure, PreconditionViolation
from .vector_fields import VectorField


class NfeLedger:
    """Counts vector-field evaluations for one trajectory."""

    def __init__(self):
        self.count = 0

    def evaluate(self, field: VectorField, x, t: float) -> np.ndarray:
        self.count += 1
        return field(x, t)

    def __repr__(self):
        return f"NfeLedger(count={self.count})"


class RecordTag(str, enum.Enum):
    STEP_START = "step_start"
    INTERMEDIATE = "intermediate"
    HISTORY = "history"


@dataclass(frozen=True)
class EvalRecord:
    time: float
    state: np.ndarray
    value: np.ndarray
    tag: RecordTag
    delta: float | None = None


class StepperKind(str, enum.Enum):
    EULER = "euler"
    HEUN = "heun"
    RK2 = "rk2"
    ADAMS_BASHFORTH = "ab"


# Adams-Bashforth coefficients on a uniform grid, newest evaluation first.
AB_COEFFS = {
    1: (1.0,),
    2: (3 / 2, -1 / 2),
    3: (23 / 12, -16 / 12, 5 / 12),
    4: (55 / 24, -59 / 24, 37 / 24, -9 / 24),
}


@dataclass(frozen=True)
class StepperSpec:
    """A baseline method and the metadata the extrapolation layer needs.

    ``local_order_p`` is the exponent of the leading local error term:
    Euler 2, second-order Runge-Kutta 3, an m-step Adams-Bashforth m + 1.
    ``b`` holds Adams-Bashforth weights newest-first (``len(b) - 1`` past
    evaluations are needed).  ``allow_nonuniform`` lets the multistep method
    apply its fixed weights on an unevenly spaced grid instead of refusing.
    """

    kind: StepperKind
    local_order_p: int
    evals_per_step: int
    a1: float = 0.5
    a2: float = 0.5
    delta: float = 1.0
    b: tuple[float, ...] = ()
    allow_nonuniform: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", StepperKind(self.kind))
        if self.local_order_p < 2:
            raise InvalidArgument("local_order_p must be >= 2")
        if self.kind in (StepperKind.RK2, StepperKind.HEUN):
            if abs(self.a1 + self.a2 - 1.0) > 1e-12:
                raise InvalidArgument(f"rk2 needs a1 + a2 = 1, got {self.a1} + {self.a2}")
            if not 0 < self.delta <= 1:
                raise InvalidArgument(f"rk2 needs 0 < delta <= 1, got {self.delta}")
        if self.kind is StepperKind.ADAMS_BASHFORTH:
            if not self.b:
                raise InvalidArgument("Adams-Bashforth needs coefficients")
            if abs(sum(self.b) - 1.0) > 1e-12:
                raise InvalidArgument(f"Adams-Bashforth weights must sum to 1, got {sum(self.b)}")

    @property
    def n_history(self) -> int:
        """Past evaluations consumed by one multistep update."""
        return len(self.b) - 1 if self.kind is StepperKind.ADAMS_BASHFORTH else 0

    @property
    def reuse_protocol(self) -> str:
        if self.kind is StepperKind.EULER:
            return "coarse step reuses the block-entry evaluation"
        if self.kind is StepperKind.ADAMS_BASHFORTH:
            return "coarse step reuses block-entry evaluations at stride k"
        return "coarse step reuses the block-entry slope and the stored slope nearest the delta point (k=2)"

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "local_order_p": self.local_order_p}
        if self.kind in (StepperKind.RK2, StepperKind.HEUN):
            d.update(a1=self.a1, a2=self.a2, delta=self.delta)
        if self.kind is StepperKind.ADAMS_BASHFORTH:
            d.update(b=list(self.b), allow_nonuniform=self.allow_nonuniform)
        return d


def euler() -> StepperSpec:
    return StepperSpec(StepperKind.EULER, local_order_p=2, evals_per_step=1)


def heun() -> StepperSpec:
    return StepperSpec(StepperKind.HEUN, local_order_p=3, evals_per_step=2)


def rk2(a1: float, a2: float, delta: float) -> StepperSpec:
    return StepperSpec(StepperKind.RK2, local_order_p=3, evals_per_step=2, a1=a1, a2=a2, delta=delta)


def midpoint() -> StepperSpec:
    return rk2(0.0, 1.0, 0.5)


def adams_bashforth(steps: int = 2, b: Sequence[float] | None = None, allow_nonuniform: bool = False) -> StepperSpec:
    if b is None:
        if steps not in AB_COEFFS:
            raise InvalidArgument(f"no built-in Adams-Bashforth coefficients for {steps} steps")
        b = AB_COEFFS[steps]
    b = tuple(float(v) for v in b)
    return StepperSpec(
        StepperKind.ADAMS_BASHFORTH,
        local_order_p=len(b) + 1,
        evals_per_step=1,
        b=b,
        allow_nonuniform=allow_nonuniform,
    )


def _check_finite(x, where: str):
    if not np.all(np.isfinite(x)):
        raise NumericalFailure(f"non-finite state in {where}")


def euler_step(field, x, t_from: float, t_to: float, ledger: NfeLedger):
    _check_finite(x, "euler_step")
    z = ledger.evaluate(field, x, t_from)
    rec = EvalRecord(t_from, x, z, RecordTag.STEP_START)
    return x + (t_to - t_from) * z, rec


def heun_step(field, x, t_from: float, t_to: float, ledger: NfeLedger):
    _check_finite(x, "heun_step")
    dt = t_to - t_from
    z0 = ledger.evaluate(field, x, t_from)
    x_pred = x + dt * z0
    z1 = ledger.evaluate(field, x_pred, t_to)
    records = [
        EvalRecord(t_from, x, z0, RecordTag.STEP_START),
        EvalRecord(t_to, x_pred, z1, RecordTag.INTERMEDIATE, delta=1.0),
    ]
    return x + dt * (0.5 * z0 + 0.5 * z1), records


def rk2_step(field, x, t_from: float, t_to: float, spec: StepperSpec, ledger: NfeLedger):
    """Two-stage Runge-Kutta; the delta-point state comes from an Euler substep."""
    if abs(spec.a1 + spec.a2 - 1.0) > 1e-12:
        raise InvalidArgument("rk2 needs a1 + a2 = 1")
    _check_finite(x, "rk2_step")
    z0 = ledger.evaluate(field, x, t_from)
    # delta = 1 must land exactly on t_to so stored records line up with grid times
    t_mid = t_to if spec.delta == 1.0 else t_from + spec.delta * (t_to - t_from)
    x_mid = x + (t_mid - t_from) * z0
    z1 = ledger.evaluate(field, x_mid, t_mid)
    records = [
        EvalRecord(t_from, x, z0, RecordTag.STEP_START),
        EvalRecord(t_mid, x_mid, z1, RecordTag.INTERMEDIATE, delta=spec.delta),
    ]
    return x - (t_from - t_to) * (spec.a1 * z0 + spec.a2 * z1), records


def check_uniform_history(times: Sequence[float], step: float, rtol: float = 1e-9) -> bool:
    """True if ``times`` (newest first) are spaced exactly ``|step|`` apart."""
    gaps = np.diff(np.asarray(times, dtype=np.float64))
    return bool(np.all(np.abs(np.abs(gaps) - abs(step)) <= rtol * abs(step)))


def ab_combination(b: Sequence[float], values: Sequence[np.ndarray]) -> np.ndarray:
    acc = b[0] * values[0]
    for bj, v in zip(b[1:], values[1:]):
        acc = acc + bj * v
    return acc


def adams_bashforth_step(
    field,
    x,
    history: Sequence[EvalRecord],
    t_from: float,
    t_to: float,
    b: Sequence[float],
    ledger: NfeLedger,
    allow_nonuniform: bool = False,
):
    """One Adams-Bashforth step.

    ``history`` holds the ``len(b) - 1`` most recent past evaluations,
    newest first.  A fresh evaluation at ``t_from`` is taken and combined
    with them.
    """
    s = len(b) - 1
    if len(history) < s:
        raise PreconditionViolation(f"Adams-Bashforth needs {s} past evaluations, got {len(history)}")
    history = list(history[:s])
    dt = t_to - t_from
    if not allow_nonuniform and s and not check_uniform_history([t_from] + [r.time for r in history], dt):
        raise PreconditionViolation("Adams-Bashforth history is not uniformly spaced")
    _check_finite(x, "adams_bashforth_step")
    z = ledger.evaluate(field, x, t_from)
    rec = EvalRecord(t_from, x, z, RecordTag.HISTORY)
    values = [z] + [r.value for r in history]
    return x + dt * ab_combination(b, values), [rec]


def bootstrap_history(field, x, times: Sequence[float], n_steps: int, ledger: NfeLedger):
    """Run ``n_steps`` Euler steps along ``times`` to seed a multistep method.

    Returns the final state and the recorded evaluations (newest first),
    tagged as history so later Adams-Bashforth steps can consume them.
    """
    if len(times) < n_steps + 1:
        raise PreconditionViolation("grid prefix shorter than the warm-up")
    records = []
    for n in range(n_steps):
        x, rec = euler_step(field, x, times[n], times[n + 1], ledger)
        records.insert(0, EvalRecord(rec.time, rec.state, rec.value, RecordTag.HISTORY))
    return x, records


def make_stepper(name: str, params: dict | None = None) -> StepperSpec:
    """Build a stepper from its config name: ``euler``, ``heun``, ``rk2``, ``midpoint``, ``ab``."""
    params = dict(params or {})
    if name == "euler":
        return euler()
    if name == "heun":
        return heun()
    if name == "midpoint":
        return midpoint()
    if name == "rk2":
        return rk2(params.get("a1", 0.5), params.get("a2", 0.5), params.get("delta", 1.0))
    if name == "ab":
        return adams_bashforth(
            params.get("steps", 2), params.get("b"), params.get("allow_nonuniform", False)
        )
    raise InvalidArgument(f"unknown solver {name!r}")

