"""Analytic right-hand sides for the sampling ODE, with reference solutions.

All fields act on arrays of shape ``(..., dim)`` so a whole batch of
trajectories can be advanced with one call.  Fields in physical time use
``s(t) = 1`` and ``sigma(t) = t``, i.e. ``dx/dt = -t * grad log p(x; t)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidArgument, UnsupportedOperation
from .time_grid import VariableKind, alpha_from_gamma


class OracleKind(str, enum.Enum):
    CLOSED_FORM = "closed_form"
    FINE_RK4 = "fine_rk4"


@dataclass(frozen=True)
class ReferenceOracle:
    kind: OracleKind
    accuracy_bound: float
    # closed form: exact(x_a, t_a, t_b) -> x_b
    exact: Optional[Callable] = None
    min_steps: int = 10_000


def _edm_prior(rng, t, shape):
    return np.sqrt(1.0 + t * t) * rng.standard_normal(shape)


def _edm_step_variance(t_from, t_to):
    # variance injected by the reverse SDE with sigma(t) = t over one step
    return abs(t_from * t_from - t_to * t_to)


@dataclass(frozen=True)
class VectorField:
    """Pure, deterministic ``f(x, t)``.

    ``prior`` draws ``x_T``; ``step_variance`` is the noise variance a
    stochastic baseline sampler would inject over one step, used by the SDE
    bridge.
    """

    name: str
    dim: int
    fn: Callable[[np.ndarray, float], np.ndarray]
    oracle: Optional[ReferenceOracle] = None
    variable_kind: VariableKind = VariableKind.PHYSICAL_T
    prior: Callable = _edm_prior
    step_variance: Callable[[float, float], float] = _edm_step_variance
    smoothness_note: str = "smooth in (x, t); score derivative Lipschitz"
    params: dict = field(default_factory=dict)

    def __call__(self, x, t):
        return self.fn(x, t)

    def sample_prior(self, rng: np.random.Generator, t: float, batch: int) -> np.ndarray:
        return self.prior(rng, t, (batch, self.dim))


def gaussian_flow_field(dim: int = 1) -> VectorField:
    """Flow of N(0, I) data: ``f(x, t) = t x / (1 + t^2)``, solved in closed form."""
    if dim < 1:
        raise InvalidArgument("dim must be >= 1")

    def fn(x, t):
        return t * x / (1.0 + t * t)

    def exact(x, t_a, t_b):
        return x * np.sqrt((1.0 + t_b * t_b) / (1.0 + t_a * t_a))

    oracle = ReferenceOracle(OracleKind.CLOSED_FORM, accuracy_bound=1e-15, exact=exact)
    return VectorField("gaussian_flow", dim, fn, oracle, params={"dim": dim})


def gaussian_mixture_field(means, weights=None) -> VectorField:
    """Flow of a mixture of unit-variance Gaussians.

    At time ``t`` the marginal is ``sum_m w_m N(mu_m, (1 + t^2) I)`` and
    ``f(x, t) = t (x - E[mu | x, t]) / (1 + t^2)`` with posterior component
    responsibilities.  Reference solutions come from fine RK4.
    """
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    if means.size == 0:
        raise InvalidArgument("mixture needs at least one component")
    n_comp, dim = means.shape
    if weights is None:
        weights = np.full(n_comp, 1.0 / n_comp)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n_comp,):
        raise InvalidArgument(f"expected {n_comp} weights, got {weights.shape}")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
        raise InvalidArgument("mixture weights must lie on the simplex")
    log_w = np.log(weights)

    def posterior_mean(x, var):
        diff = x[..., None, :] - means
        logits = log_w - 0.5 * np.sum(diff * diff, axis=-1) / var
        logits -= logits.max(axis=-1, keepdims=True)
        r = np.exp(logits)
        r /= r.sum(axis=-1, keepdims=True)
        return r @ means

    def fn(x, t):
        var = 1.0 + t * t
        return t * (x - posterior_mean(x, var)) / var

    def prior(rng, t, shape):
        batch = shape[0]
        comp = rng.choice(n_comp, size=batch, p=weights)
        return means[comp] + np.sqrt(1.0 + t * t) * rng.standard_normal(shape)

    oracle = ReferenceOracle(OracleKind.FINE_RK4, accuracy_bound=1e-10)
    return VectorField(
        "gaussian_mixture",
        dim,
        fn,
        oracle,
        prior=prior,
        params={"means": means.tolist(), "weights": weights.tolist()},
    )


def mixture_log_density(means, weights, x, t):
    """``log p(x; t)`` for the mixture above; used as a finite-difference oracle."""
    means = np.atleast_2d(np.asarray(means, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    var = 1.0 + t * t
    d = means.shape[1]
    sq = np.sum((x[None, :] - means) ** 2, axis=-1)
    comps = np.log(weights) - 0.5 * sq / var - 0.5 * d * np.log(2 * np.pi * var)
    top = comps.max()
    return top + np.log(np.sum(np.exp(comps - top)))


def constant_field(c, dim: int | None = None) -> VectorField:
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    if dim is not None and c.size == 1:
        c = np.full(dim, c[0])

    def fn(x, t):
        return np.broadcast_to(c, np.shape(x)).copy()

    def exact(x, t_a, t_b):
        return x + c * (t_b - t_a)

    oracle = ReferenceOracle(OracleKind.CLOSED_FORM, accuracy_bound=1e-15, exact=exact)
    return VectorField("constant", c.size, fn, oracle, params={"c": c.tolist()})


def zero_field(dim: int = 1) -> VectorField:
    f = constant_field(0.0, dim)
    return VectorField("zero", dim, f.fn, f.oracle, params={"dim": dim})


def linear_field(rate: float, dim: int = 1) -> VectorField:
    """``f(x, t) = rate * x``; the exact flow is exponential."""

    def fn(x, t):
        return rate * x

    def exact(x, t_a, t_b):
        return x * np.exp(rate * (t_b - t_a))

    oracle = ReferenceOracle(OracleKind.CLOSED_FORM, accuracy_bound=1e-15, exact=exact)
    return VectorField("linear", dim, fn, oracle, params={"rate": rate, "dim": dim})


def time_field(dim: int = 1) -> VectorField:
    """``f(x, t) = t``, integrated exactly by every second-order method."""

    def fn(x, t):
        return np.full(np.shape(x), float(t))

    def exact(x, t_a, t_b):
        return x + 0.5 * (t_b * t_b - t_a * t_a)

    oracle = ReferenceOracle(OracleKind.CLOSED_FORM, accuracy_bound=1e-15, exact=exact)
    return VectorField("time", dim, fn, oracle, params={"dim": dim})


# DDIM in gamma coordinates -------------------------------------------------


def x_to_y(x, gamma):
    return x * np.sqrt(1.0 + gamma * gamma)


def y_to_x(y, gamma):
    return y / np.sqrt(1.0 + gamma * gamma)


def vp_gaussian_noise_fn(data_std: float = 1.0):
    """Exact noise predictor ``E[eps | x_t]`` for N(0, data_std^2 I) data under VP diffusion.

    Written in terms of gamma: ``eps(x, gamma) = gamma sqrt(1 + gamma^2) x / (s^2 + gamma^2)``.
    """
    s2 = data_std * data_std

    def noise_fn(x, gamma):
        return gamma * np.sqrt(1.0 + gamma * gamma) * x / (s2 + gamma * gamma)

    return noise_fn


def ddim_gamma_field(
    noise_fn: Callable,
    dim: int = 1,
    gamma_to_t: Callable[[float], float] | None = None,
    exact: Callable | None = None,
    data_std: float | None = None,
) -> VectorField:
    """DDIM seen as Euler on ``dy = eps(x, t) dgamma`` with ``y = x sqrt(1 + gamma^2)``.

    The integrated state is ``y``; the field recovers ``x`` internally.
    ``noise_fn`` is called as ``noise_fn(x, t)`` where ``t = gamma_to_t(gamma)``
    (identity by default, i.e. the model is indexed by gamma itself).
    """
    to_t = gamma_to_t or (lambda g: g)

    def fn(y, gamma):
        return noise_fn(y_to_x(y, gamma), to_t(gamma))

    oracle = None
    if exact is not None:
        oracle = ReferenceOracle(OracleKind.CLOSED_FORM, accuracy_bound=1e-15, exact=exact)
    else:
        oracle = ReferenceOracle(OracleKind.FINE_RK4, accuracy_bound=1e-10)

    s2 = 1.0 if data_std is None else data_std * data_std

    def prior(rng, gamma, shape):
        # x_t ~ N(0, (alpha^2 s^2 + 1 - alpha^2) I), reported in y units
        a2 = float(alpha_from_gamma(gamma)) ** 2
        x = np.sqrt(a2 * s2 + 1.0 - a2) * rng.standard_normal(shape)
        return x_to_y(x, gamma)

    def step_variance(g_from, g_to):
        # eta = 1 DDIM variance expressed in y units
        g_hi, g_lo = max(g_from, g_to), min(g_from, g_to)
        if g_hi == 0:
            return 0.0
        return g_lo * g_lo * (g_hi * g_hi - g_lo * g_lo) / (g_hi * g_hi)

    return VectorField(
        "ddim_gamma",
        dim,
        fn,
        oracle,
        variable_kind=VariableKind.DDIM_GAMMA,
        prior=prior,
        step_variance=step_variance,
        params={"dim": dim, "data_std": data_std},
    )


def vp_gaussian_ddim_field(dim: int = 1, data_std: float = 1.0) -> VectorField:
    """DDIM field for Gaussian data with its closed-form flow ``y ∝ sqrt(s^2 + gamma^2)``."""
    s2 = data_std * data_std

    def exact(y, g_a, g_b):
        return y * np.sqrt((s2 + g_b * g_b) / (s2 + g_a * g_a))

    return ddim_gamma_field(vp_gaussian_noise_fn(data_std), dim, exact=exact, data_std=data_std)


# reference solutions -------------------------------------------------------


def rk4_integrate(field: VectorField, x, t_a: float, t_b: float, n_steps: int) -> np.ndarray:
    """Classical RK4 on a uniform grid from ``t_a`` to ``t_b``."""
    x = np.array(x, dtype=np.float64)
    h = (t_b - t_a) / n_steps
    f = field.fn
    for n in range(n_steps):
        t = t_a + n * h
        k1 = f(x, t)
        k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
        k3 = f(x + 0.5 * h * k2, t + 0.5 * h)
        k4 = f(x + h * k3, t + h)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return x


def reference_endpoint(
    field: VectorField,
    x_T,
    T: float,
    t_end: float,
    finest_n: int | None = None,
    n_steps: int | None = None,
) -> np.ndarray:
    """Exact (closed form) or high-accuracy (fine RK4) solution at ``t_end``.

    For RK4 the internal step count is at least ``oracle.min_steps`` and at
    least 100x ``finest_n``, the finest grid it is compared against.
    """
    oracle = field.oracle
    if oracle is None:
        raise UnsupportedOperation(f"field {field.name!r} has no reference oracle")
    x_T = np.array(x_T, dtype=np.float64)
    if T == t_end:
        return x_T
    if oracle.kind is OracleKind.CLOSED_FORM:
        return oracle.exact(x_T, T, t_end)
    if n_steps is None:
        n_steps = max(oracle.min_steps, 100 * (finest_n or 0))
    return rk4_integrate(field, x_T, T, t_end, n_steps)


def rk4_self_check(field: VectorField, x_T, T: float, t_end: float, n_steps: int = 10_000) -> float:
    """Max abs difference between RK4 at ``n_steps`` and ``2 n_steps``."""
    a = rk4_integrate(field, x_T, T, t_end, n_steps)
    b = rk4_integrate(field, x_T, T, t_end, 2 * n_steps)
    return float(np.max(np.abs(a - b)))
