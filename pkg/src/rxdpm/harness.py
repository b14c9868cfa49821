"""Config-driven experiments: single runs, order sweeps, comparisons, hybrids.

A config is a JSON object::

    {
      "field":  {"name": "gaussian_flow", "dim": 2},
      "grid":   {"schedule": "uniform", "T": 1.0},
      "solver": {"name": "euler", "params": {}},
      "rx":     {"k": 2, "p": null, "mode": "rx_grid_aware",
                 "tail_policy": "skip_extrapolation", "mask": null},
      "N": 10,                       # or "ladder": [10, 20, 40, 80]
      "batch": 64, "seed": 0,
      "stochastic": {"eta": 0.0, "seed": 0},          # optional
      "methods": [{"label": ..., "solver": ..., "rx": ...}],  # compare
      "mask": "last:2"                                 # hybrid
    }

Errors are the Euclidean endpoint error against the field's reference
solution, averaged over the batch.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, InvalidArgument, NumericalFailure
from .rx import RxConfig, RxMode, sample
from .sde import StochasticConfig, sample_stochastic
from .solvers import StepperKind, StepperSpec, check_uniform_history, make_stepper
from .time_grid import (
    TailPolicy,
    TimeGrid,
    build_power_grid,
    build_uniform_grid,
    to_gamma_grid,
    vp_linear_alphas,
)
from .vector_fields import (
    VectorField,
    constant_field,
    gaussian_flow_field,
    gaussian_mixture_field,
    linear_field,
    reference_endpoint,
    vp_gaussian_ddim_field,
    zero_field,
)

CSV_COLUMNS = ["method", "field", "solver", "k", "p", "N", "nfe", "error", "slope"]
FLOOR_RTOL = 1e-12


class RunAborted(NumericalFailure):
    """A sweep stopped early; ``report`` holds the partial results."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


# config ----------------------------------------------------------------------


def _require(d, key, path, kind=None):
    if not isinstance(d, dict) or key not in d:
        raise ConfigError("missing required key", f"{path}.{key}" if path else key)
    v = d[key]
    if kind is not None and not isinstance(v, kind):
        raise ConfigError(f"expected {getattr(kind, '__name__', kind)}, got {type(v).__name__}", f"{path}.{key}")
    return v


@dataclass
class MethodSpec:
    label: str
    solver_name: str
    stepper: StepperSpec
    rx: RxConfig

    def describe(self) -> dict:
        return {
            "label": self.label,
            "solver": self.solver_name,
            "k": self.rx.k,
            "p": self.rx.exponent(self.stepper),
            "mode": self.rx.mode.value,
        }


@dataclass
class ExperimentConfig:
    field: dict
    grid: dict
    solver: dict = field(default_factory=lambda: {"name": "euler"})
    rx: dict = field(default_factory=dict)
    stochastic: dict | None = None
    N: int | None = None
    ladder: list | None = None
    batch: int = 1
    seed: int = 0
    methods: list | None = None
    mask: Any = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f for f in cls.__dataclass_fields__}
        for key in d:
            if key not in known and key not in ("output",):
                raise ConfigError("unknown key", key)
        field_spec = _require(d, "field", "")
        if isinstance(field_spec, str):
            field_spec = {"name": field_spec}
        grid_spec = _require(d, "grid", "", dict)
        solver = d.get("solver", {"name": "euler"})
        if isinstance(solver, str):
            solver = {"name": solver}
        cfg = cls(
            field=field_spec,
            grid=grid_spec,
            solver=solver,
            rx=d.get("rx") or {},
            stochastic=d.get("stochastic"),
            N=d.get("N"),
            ladder=d.get("ladder"),
            batch=d.get("batch", 1),
            seed=d.get("seed", 0),
            methods=d.get("methods"),
            mask=d.get("mask"),
        )
        cfg.validate()
        return cfg

    def validate(self):
        if not isinstance(self.batch, int) or self.batch < 1:
            raise ConfigError("must be a positive integer", "batch")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("must be a nonnegative integer", "seed")
        if self.N is not None and (not isinstance(self.N, int) or self.N < 1):
            raise ConfigError("must be a positive integer", "N")
        if self.ladder is not None:
            if not isinstance(self.ladder, list) or not all(isinstance(n, int) and n >= 1 for n in self.ladder):
                raise ConfigError("must be a list of positive integers", "ladder")
            if any(b <= a for a, b in zip(self.ladder, self.ladder[1:])):
                raise ConfigError("must be strictly increasing", "ladder")
        # build everything once so errors surface at load time with a key path
        build_field(self.field)
        for n, m in enumerate(self.method_specs()):
            for N in self.ns():
                if m.rx.mode is not RxMode.BASELINE_ONLY and N < m.rx.k:
                    raise ConfigError(f"N={N} is smaller than k={m.rx.k}", f"methods[{n}]" if self.methods else "N")
        if self.stochastic is not None:
            stochastic_config(self.stochastic)

    def ns(self) -> list:
        if self.ladder:
            return list(self.ladder)
        if self.N is not None:
            return [self.N]
        if "times" in self.grid or "file" in self.grid:
            return [len(load_grid(self.grid, None).times) - 1]
        raise ConfigError("need N or ladder", "N")

    def method_specs(self) -> list:
        if not self.methods:
            return [make_method(self.solver, self.rx, None, "")]
        if not isinstance(self.methods, list):
            raise ConfigError("must be a list", "methods")
        return [
            make_method(m.get("solver", self.solver), m.get("rx", {}), m.get("label"), f"methods[{n}]")
            for n, m in enumerate(self.methods)
        ]


def make_method(solver, rx: dict, label: str | None, path: str) -> MethodSpec:
    if isinstance(solver, str):
        solver = {"name": solver}
    try:
        name = _require(solver, "name", f"{path}.solver".lstrip("."), str)
        stepper = make_stepper(name, solver.get("params"))
    except ConfigError:
        raise
    except InvalidArgument as exc:
        raise ConfigError(str(exc), f"{path}.solver".lstrip(".")) from None
    try:
        rx_cfg = RxConfig(
            k=rx.get("k", 2),
            p=rx.get("p"),
            mode=rx.get("mode", "rx_grid_aware"),
            tail_policy=rx.get("tail_policy", "skip_extrapolation"),
            method_mask=rx.get("mask"),
        )
    except (InvalidArgument, ValueError) as exc:
        raise ConfigError(str(exc), f"{path}.rx".lstrip(".")) from None
    if label is None:
        label = name if rx_cfg.mode is RxMode.BASELINE_ONLY else f"{rx_cfg.mode.value}-{name}-k{rx_cfg.k}"
    return MethodSpec(label, name, stepper, rx_cfg)


def stochastic_config(d: dict) -> StochasticConfig:
    try:
        return StochasticConfig(eta=d.get("eta", 0.0), noise_seed=d.get("seed", 0))
    except InvalidArgument as exc:
        raise ConfigError(str(exc), "stochastic") from None


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return ExperimentConfig.from_dict(data)


# builders ---------------------------------------------------------------------


def build_field(spec: dict) -> VectorField:
    name = _require(spec, "name", "field", str)
    try:
        if name == "gaussian_flow":
            return gaussian_flow_field(spec.get("dim", 1))
        if name == "gaussian_mixture":
            return gaussian_mixture_field(_require(spec, "means", "field"), spec.get("weights"))
        if name == "ddim_gamma":
            return vp_gaussian_ddim_field(spec.get("dim", 1), spec.get("data_std", 1.0))
        if name == "constant":
            return constant_field(_require(spec, "c", "field"), spec.get("dim"))
        if name == "zero":
            return zero_field(spec.get("dim", 1))
        if name == "linear":
            return linear_field(_require(spec, "rate", "field"), spec.get("dim", 1))
    except InvalidArgument as exc:
        raise ConfigError(str(exc), "field") from None
    raise ConfigError(f"unknown field {name!r}", "field.name")


def load_grid(spec: dict, N: int | None) -> TimeGrid:
    if "times" in spec:
        return TimeGrid.from_dict(spec)
    path = spec["file"]
    try:
        return TimeGrid.from_json(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read grid file: {exc}", "grid.file") from None


def build_grid(spec: dict, N: int) -> TimeGrid:
    try:
        if "times" in spec or "file" in spec:
            grid = load_grid(spec, N)
            if grid.n_steps != N:
                raise ConfigError(f"explicit grid has {grid.n_steps} steps, N={N}", "grid")
            return grid
        schedule = _require(spec, "schedule", "grid", str)
        if schedule == "uniform":
            return build_uniform_grid(spec.get("T", 1.0), N)
        if schedule == "power":
            return build_power_grid(spec.get("T", 80.0), spec.get("t_min", 0.002), N, spec.get("rho", 7.0))
        if schedule == "vp_linear":
            alphas = vp_linear_alphas(N, spec.get("beta_min", 0.1), spec.get("beta_max", 20.0), spec.get("eps", 1e-3))
            return to_gamma_grid(alphas)
    except InvalidArgument as exc:
        raise ConfigError(str(exc), "grid") from None
    raise ConfigError(f"unknown schedule {schedule!r}", "grid.schedule")


def grid_is_uniform(grid: TimeGrid) -> bool:
    return check_uniform_history(grid.times, grid.times[0] - grid.times[1])


# running ------------------------------------------------------------------------


@dataclass
class RunRecord:
    method: str
    field: str
    solver: str
    k: int
    p: int
    mode: str
    N: int
    nfe: int
    error: float
    wall_time: float
    per_block: list

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "field": self.field,
            "solver": self.solver,
            "k": self.k,
            "p": self.p,
            "mode": self.mode,
            "N": self.N,
            "nfe": self.nfe,
            "error": self.error,
            "wall_time": self.wall_time,
            "per_block": self.per_block,
        }


class Experiment:
    """Shared state for one config: field, initial batch and cached oracles."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.field = build_field(cfg.field)
        self._oracles = {}
        self._x_T = {}

    def grid(self, N: int) -> TimeGrid:
        grid = build_grid(self.cfg.grid, N)
        if grid.variable_kind is not self.field.variable_kind:
            raise ConfigError(
                f"field {self.field.name!r} needs a {self.field.variable_kind.value} grid", "grid"
            )
        return grid

    def x_T(self, T: float) -> np.ndarray:
        if T not in self._x_T:
            rng = np.random.default_rng(self.cfg.seed)
            self._x_T[T] = self.field.sample_prior(rng, T, self.cfg.batch)
        return self._x_T[T]

    def oracle(self, x_T, T: float, t_end: float) -> np.ndarray:
        key = (T, t_end)
        if key not in self._oracles:
            finest = max(self.cfg.ns())
            self._oracles[key] = reference_endpoint(self.field, x_T, T, t_end, finest_n=finest)
        return self._oracles[key]

    def run(self, method: MethodSpec, N: int, rx: RxConfig | None = None) -> RunRecord:
        rx = rx or method.rx
        grid = self.grid(N)
        if (
            method.stepper.kind is StepperKind.ADAMS_BASHFORTH
            and not method.stepper.allow_nonuniform
            and not grid_is_uniform(grid)
        ):
            raise ConfigError("Adams-Bashforth needs a uniform grid unless allow_nonuniform is set", "solver")
        x_T = self.x_T(grid.T)
        start = time.perf_counter()
        if self.cfg.stochastic is not None:
            result = sample_stochastic(
                self.field, grid, method.stepper, rx, stochastic_config(self.cfg.stochastic), x_T=x_T
            )
        else:
            result = sample(self.field, grid, method.stepper, rx, x_T=x_T)
        wall = time.perf_counter() - start
        ref = self.oracle(x_T, grid.T, grid.t_end)
        err = float(np.mean(np.linalg.norm(np.atleast_2d(result.x0 - ref), axis=-1)))
        if not math.isfinite(err):
            raise NumericalFailure(f"{method.label} N={N}: non-finite error")
        return RunRecord(
            method=method.label,
            field=self.field.name,
            solver=method.solver_name,
            k=rx.k,
            p=rx.exponent(method.stepper),
            mode=rx.mode.value,
            N=N,
            nfe=result.nfe,
            error=err,
            wall_time=wall,
            per_block=[b.to_dict() for b in result.blocks],
        )

    def error_floor(self) -> float:
        x_T = self.x_T(self.grid(self.cfg.ns()[0]).T)
        return FLOOR_RTOL * max(1.0, float(np.mean(np.linalg.norm(np.atleast_2d(x_T), axis=-1))))


def fit_order(ns, errors, floor: float = 0.0) -> dict:
    """Least-squares fit of ``log(error)`` against ``log(N)``.

    ``order`` is minus the slope.  Errors at or under ``floor`` make the fit
    meaningless and are reported instead of a slope.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if np.any(errors <= floor):
        return {"status": "below tolerance floor", "slope": None, "order": None, "intercept": None, "residual": None}
    x, y = np.log(np.asarray(ns, dtype=np.float64)), np.log(errors)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    return {
        "status": "ok",
        "slope": float(slope),
        "order": float(-slope),
        "intercept": float(intercept),
        "residual": float(np.sqrt(np.mean(resid**2))),
    }


# commands -------------------------------------------------------------------------


def _base_report(command: str, cfg: ExperimentConfig) -> dict:
    return {"command": command, "field": cfg.field, "grid": cfg.grid, "seed": cfg.seed, "batch": cfg.batch, "runs": []}


def cmd_solve(cfg: ExperimentConfig) -> dict:
    exp = Experiment(cfg)
    report = _base_report("solve", cfg)
    for method in cfg.method_specs():
        for N in cfg.ns():
            report["runs"].append(exp.run(method, N).to_dict())
    return report


def _sweep(exp: Experiment, methods, ladder, report):
    for method in methods:
        for N in ladder:
            try:
                report["runs"].append(exp.run(method, N).to_dict())
            except NumericalFailure as exc:
                report["partial"] = True
                report["abort_reason"] = f"{method.label} N={N}: {exc}"
                raise RunAborted(report["abort_reason"], report) from exc


def cmd_order(cfg: ExperimentConfig) -> dict:
    ladder = cfg.ns()
    if len(ladder) < 4:
        raise ConfigError("an order sweep needs at least 4 ladder points", "ladder")
    exp = Experiment(cfg)
    report = _base_report("order", cfg)
    methods = cfg.method_specs()
    _sweep(exp, methods, ladder, report)
    floor = exp.error_floor()
    report["sweeps"] = []
    for method in methods:
        rows = [r for r in report["runs"] if r["method"] == method.label]
        fit = fit_order([r["N"] for r in rows], [r["error"] for r in rows], floor)
        report["sweeps"].append({**method.describe(), "field": exp.field.name, **fit})
    return report


def cmd_compare(cfg: ExperimentConfig) -> dict:
    methods = cfg.method_specs()
    if len(methods) < 2:
        raise ConfigError("compare needs at least two methods", "methods")
    labels = [m.label for m in methods]
    if len(set(labels)) != len(labels):
        raise ConfigError("method labels must be unique", "methods")
    exp = Experiment(cfg)
    report = _base_report("compare", cfg)
    ladder = cfg.ns()
    _sweep(exp, methods, ladder, report)
    table = {m.label: [r["error"] for r in report["runs"] if r["method"] == m.label] for m in methods}
    ratios = {}
    for a in range(len(labels)):
        for b in range(a + 1, len(labels)):
            ea, eb = table[labels[a]], table[labels[b]]
            ratios[f"{labels[a]}/{labels[b]}"] = [x / y if y > 0 else None for x, y in zip(ea, eb)]
    report["comparison"] = {"N": ladder, "errors": table, "ratios": ratios}
    if len(ladder) >= 4:
        floor = exp.error_floor()
        report["sweeps"] = [
            {**m.describe(), "field": exp.field.name, **fit_order(ladder, table[m.label], floor)} for m in methods
        ]
    return report


def cmd_hybrid(cfg: ExperimentConfig) -> dict:
    if cfg.mask is None:
        raise ConfigError("hybrid needs a mask spec", "mask")
    (method,) = cfg.method_specs()[:1]
    exp = Experiment(cfg)
    report = _base_report("hybrid", cfg)
    variants = [("baseline", "none"), (f"hybrid[{_mask_label(cfg.mask)}]", cfg.mask), ("rx", "all")]
    for N in cfg.ns():
        for label, mask in variants:
            rx = RxConfig(
                k=method.rx.k,
                p=method.rx.p,
                mode=method.rx.mode,
                tail_policy=method.rx.tail_policy,
                method_mask=mask,
            )
            try:
                rec = exp.run(MethodSpec(label, method.solver_name, method.stepper, rx), N, rx)
            except InvalidArgument as exc:
                raise ConfigError(str(exc), "mask") from None
            row = rec.to_dict()
            row["extrapolated_blocks"] = [b["index"] for b in rec.per_block if b["extrapolated"]]
            report["runs"].append(row)
    return report


def _mask_label(mask) -> str:
    return mask if isinstance(mask, str) else "".join("1" if m else "0" for m in mask)


COMMANDS = {"solve": cmd_solve, "order": cmd_order, "compare": cmd_compare, "hybrid": cmd_hybrid}


# output ------------------------------------------------------------------------------


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2) + "\n"


def report_to_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in report.get("runs", []):
        writer.writerow({c: r.get(c, "") for c in CSV_COLUMNS if c != "slope"})
    for s in report.get("sweeps", []):
        writer.writerow(
            {
                "method": s["label"],
                "field": s["field"],
                "solver": s["solver"],
                "k": s["k"],
                "p": s["p"],
                "slope": "" if s["slope"] is None else s["slope"],
            }
        )
    return buf.getvalue()


def strip_wall_time(report: dict) -> dict:
    out = copy.deepcopy(report)
    for r in out.get("runs", []):
        r.pop("wall_time", None)
    return out
