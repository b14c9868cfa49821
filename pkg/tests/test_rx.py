import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rxdpm.errors import DegenerateExtrapolation, InvalidArgument, NumericalFailure
from rxdpm.rx import (
    RxConfig,
    classical_richardson,
    coarse_step_euler,
    extrapolate,
    run_block,
    sample,
    select_delta_record,
)
from rxdpm.solvers import (
    EvalRecord,
    NfeLedger,
    RecordTag,
    adams_bashforth,
    euler,
    euler_step,
    heun,
    midpoint,
    rk2,
)
from rxdpm.time_grid import TimeGrid, build_power_grid, build_uniform_grid, compute_lambdas, to_gamma_grid
from rxdpm.vector_fields import (
    constant_field,
    gaussian_flow_field,
    gaussian_mixture_field,
    linear_field,
    reference_endpoint,
    time_field,
    vp_gaussian_ddim_field,
    zero_field,
)

DECAY = linear_field(-1.0)


def one(v):
    return np.array([float(v)])


def test_extrapolate_uniform_pair():
    assert extrapolate(2.25, 2.0, [0.5, 0.5], 2) == 2.5


def test_extrapolate_nonuniform_pair():
    fine, coarse = 1.3, 0.7
    assert extrapolate(fine, coarse, [0.6, 0.4], 2) == pytest.approx((fine - 0.52 * coarse) / 0.48, rel=1e-14)


@settings(max_examples=200, deadline=None)
@given(
    st.floats(-1e6, 1e6),
    st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6),
    st.integers(2, 5),
)
def test_affine_identity(c, weights, p):
    lambdas = np.array(weights) / sum(weights)
    assert extrapolate(c, c, lambdas, p) == c
    assert classical_richardson(c, c, len(weights), p - 1) == c


def test_classical_richardson_first_order():
    assert classical_richardson(2.25, 2.0, 2, 1) == 2.5


@pytest.mark.parametrize("k", [2, 3, 4])
@pytest.mark.parametrize("p", [2, 3, 4, 5])
def test_uniform_grid_equivalence(k, p):
    rng = np.random.default_rng(100 * k + p)
    fine = rng.standard_normal((100, 3))
    coarse = fine + 0.1 * rng.standard_normal((100, 3))
    a = extrapolate(fine, coarse, [1.0 / k] * k, p)
    b = classical_richardson(fine, coarse, k, p - 1)
    np.testing.assert_allclose(a, b, rtol=1e-12)


def test_classical_richardson_rejects_bad_arguments():
    with pytest.raises(InvalidArgument):
        classical_richardson(1.0, 1.0, 1, 1)
    with pytest.raises(InvalidArgument):
        classical_richardson(1.0, 1.0, 2, 0)


def test_degenerate_weights_raise():
    with pytest.raises(DegenerateExtrapolation):
        extrapolate(1.0, 0.0, [1 - 1e-12, 1e-12], 2)


def _block(grid, k=2, i=None):
    return compute_lambdas(grid, grid.n_steps if i is None else i, k)


def test_worked_euler_block():
    grid = TimeGrid((1.0, 0.5, 0.0))
    ledger = NfeLedger()
    x, state, report, _ = run_block(DECAY, euler(), _block(grid), one(1.0), ledger, RxConfig(k=2), grid)
    assert state.fine_estimate[0] == 2.25
    assert state.coarse_estimate[0] == 2.0
    assert x[0] == 2.5
    assert report.extrapolated and ledger.count == 2
    assert abs(2.5 - math.e) < abs(2.25 - math.e) < abs(2.0 - math.e)


def test_coarse_euler_matches_fresh_step_and_is_free():
    grid = build_power_grid(2.0, 0.01, 6, 7.0)
    f = gaussian_mixture_field([[2.0], [-2.0]])
    x = np.array([[0.3], [-1.7]])
    block = _block(grid, 3)
    ledger = NfeLedger()
    _, state, _, _ = run_block(f, euler(), block, x, ledger, RxConfig(k=3), grid)
    count = ledger.count
    coarse = coarse_step_euler(state, grid)
    assert ledger.count == count
    fresh = euler_step(f, x, grid.t(block.start_index), grid.t(block.end_index), NfeLedger())[0]
    assert np.array_equal(coarse, fresh)
    assert np.array_equal(state.coarse_estimate, fresh)


def test_select_delta_record_tie_prefers_larger_time():
    recs = [EvalRecord(t, one(0), one(0), RecordTag.INTERMEDIATE) for t in (0.4, 0.6)]
    assert select_delta_record(recs, 0.5).time == 0.6
    assert select_delta_record(recs, 0.45).time == 0.4


@pytest.mark.parametrize("spec, expected_index", [(heun(), 0), (midpoint(), 1)])
def test_rk2_coarse_slope_selection(spec, expected_index):
    grid = build_uniform_grid(1.0, 4)
    f = gaussian_flow_field()
    ledger = NfeLedger()
    block = _block(grid)
    _, state, report, _ = run_block(f, spec, block, one(1.0), ledger, RxConfig(k=2), grid)
    assert report.extrapolated
    assert ledger.count == 4
    # Heun's delta point is the block end t_{i-2}, the midpoint rule's is t_{i-1}
    z_i = state.stored_evals[0].value
    z_sel = [r for r in state.stored_evals[2:4] if r.time == grid.t(expected_index + 2)][0]
    h = grid.t(4) - grid.t(2)
    expected = 1.0 - h * (spec.a1 * z_i + spec.a2 * z_sel.value)
    assert np.array_equal(state.coarse_estimate, expected)


def test_rk2_with_k3_is_reported_as_skipped():
    grid = build_uniform_grid(1.0, 6)
    res = sample(gaussian_flow_field(), grid, heun(), RxConfig(k=3), x_T=one(1.0))
    base = sample(gaussian_flow_field(), grid, heun(), RxConfig(mode="baseline_only"), x_T=one(1.0))
    assert all(not b.extrapolated for b in res.blocks)
    assert all("k=2" in b.fallback_reason for b in res.blocks)
    assert np.array_equal(res.x0, base.x0)


def test_ab_warm_up_skips_first_block():
    grid = build_uniform_grid(1.0, 10)
    res = sample(gaussian_flow_field(), grid, adams_bashforth(2), RxConfig(k=2), x_T=one(1.0))
    assert res.nfe == 10
    assert not res.blocks[0].extrapolated
    assert res.blocks[0].fallback_reason == "insufficient stride history"
    assert all(b.extrapolated for b in res.blocks[1:])


def test_ab_constant_field_coarse_equals_fine():
    grid = build_uniform_grid(1.0, 8)
    f = constant_field(0.75)
    ledger, evals = NfeLedger(), {}
    x = one(0.0)
    for n, i in enumerate((8, 6, 4)):
        x, state, report, _ = run_block(
            f, adams_bashforth(2), _block(grid, 2, i), x, ledger, RxConfig(k=2), grid, evals_by_index=evals, index=n
        )
    assert report.extrapolated
    assert np.array_equal(state.coarse_estimate, state.fine_estimate)


def test_ab_time_field_exact_with_exact_history():
    grid = build_uniform_grid(1.0, 8)
    ab = adams_bashforth(2)
    evals = {
        j: EvalRecord(grid.t(j), one(0.0), one(grid.t(j)), RecordTag.HISTORY) for j in range(5, 9)
    }
    x_entry = one(-0.5 * (1.0 - grid.t(4) ** 2))
    x, state, report, _ = run_block(time_field(), ab, _block(grid, 2, 4), x_entry, NfeLedger(), RxConfig(k=2), grid, evals_by_index=evals)
    exact = x_entry - 0.5 * (grid.t(4) ** 2 - grid.t(2) ** 2)
    np.testing.assert_allclose(state.coarse_estimate, exact, rtol=1e-15)
    np.testing.assert_allclose(state.fine_estimate, exact, rtol=1e-15)
    np.testing.assert_allclose(x, exact, rtol=1e-15)


SOLVERS = [euler(), heun(), midpoint(), adams_bashforth(2, allow_nonuniform=True)]


@pytest.mark.parametrize("spec", SOLVERS)
@pytest.mark.parametrize("k", [2, 3, 4])
@pytest.mark.parametrize("N", [10, 12])
def test_nfe_parity(spec, k, N):
    f = gaussian_mixture_field([[2.0], [-2.0]])
    for grid in (build_uniform_grid(1.0, N), build_power_grid(80.0, 0.002, N, 7.0)):
        rx = sample(f, grid, spec, RxConfig(k=k), seed=1, batch=4)
        base = sample(f, grid, spec, RxConfig(k=k, mode="baseline_only"), seed=1, batch=4)
        assert rx.nfe == base.nfe == N * spec.evals_per_step


@pytest.mark.parametrize("spec", SOLVERS)
def test_constant_field_exact_every_method(spec):
    f = constant_field([0.75, -0.25])
    grid = TimeGrid((1.0, 0.75, 0.5, 0.25, 0.125, 0.0))
    for mode in ("rx_grid_aware", "naive_richardson", "baseline_only"):
        res = sample(f, grid, spec, RxConfig(k=2, mode=mode), x_T=np.zeros((1, 2)))
        np.testing.assert_array_equal(res.x0, [[-0.75, 0.25]])


def test_zero_field_block_is_identity():
    grid = build_uniform_grid(1.0, 4)
    x = np.array([[1.5, -2.0]])
    out, _, report, _ = run_block(zero_field(2), euler(), _block(grid), x, NfeLedger(), RxConfig(k=2), grid)
    assert np.array_equal(out, x) and report.extrapolated


@settings(max_examples=40, deadline=None)
@given(st.floats(-100, 100).filter(lambda a: abs(a) > 1e-3), st.sampled_from([2, 3]))
def test_linearity(alpha, k):
    f = gaussian_flow_field(2)
    grid = build_power_grid(5.0, 0.01, 9, 7.0)
    x = np.array([[0.4, -1.1]])
    for spec in (euler(), heun()):
        a = sample(f, grid, spec, RxConfig(k=k), x_T=alpha * x).x0
        b = alpha * sample(f, grid, spec, RxConfig(k=k), x_T=x).x0
        np.testing.assert_allclose(a, b, rtol=1e-12)


def test_brute_force_k2_euler_block():
    f = gaussian_mixture_field([[2.0], [-2.0]], [0.3, 0.7])
    grid = build_power_grid(3.0, 0.01, 8, 7.0)
    x = np.array([[0.8], [-2.5], [0.1]])
    for i in (8, 6, 4, 2):
        out, _, _, _ = run_block(f, euler(), _block(grid, 2, i), x, NfeLedger(), RxConfig(k=2), grid)
        t0, t1, t2 = grid.t(i), grid.t(i - 1), grid.t(i - 2)
        # recompute both tracks by hand
        x1 = x + (t1 - t0) * f(x, t0)
        fine = x1 + (t2 - t1) * f(x1, t1)
        coarse = x + (t2 - t0) * f(x, t0)
        l1, l2 = (t0 - t1) / (t0 - t2), (t1 - t2) / (t0 - t2)
        s = l1 * l1 + l2 * l2
        np.testing.assert_allclose(out, (fine - s * coarse) / (1 - s), rtol=1e-14)
        x = out


def test_degenerate_block_falls_back_to_fine():
    grid = TimeGrid((1.0, 1e-12, 0.0))
    out, state, report, _ = run_block(DECAY, euler(), _block(grid), one(1.0), NfeLedger(), RxConfig(k=2), grid)
    assert not report.extrapolated
    assert report.fallback_reason.startswith("degenerate")
    assert np.array_equal(out, state.fine_estimate)


def test_baseline_mode_is_plain_stepping():
    f = gaussian_mixture_field([[2.0], [-2.0]])
    grid = build_power_grid(80.0, 0.002, 10, 7.0)
    x = f.sample_prior(np.random.default_rng(0), grid.T, 16)
    res = sample(f, grid, euler(), RxConfig(mode="baseline_only"), x_T=x)
    for n in range(grid.n_steps):
        x = euler_step(f, x, grid.times[n], grid.times[n + 1], NfeLedger())[0]
    assert np.array_equal(res.x0, x)


def test_rx_euler_beats_euler_on_gaussian_flow():
    f = gaussian_flow_field()
    grid = build_uniform_grid(1.0, 10)
    exact = reference_endpoint(f, one(1.0), 1.0, 0.0)
    e_rx = abs(sample(f, grid, euler(), RxConfig(k=2), x_T=one(1.0)).x0 - exact)[0]
    e_base = abs(sample(f, grid, euler(), RxConfig(mode="baseline_only"), x_T=one(1.0)).x0 - exact)[0]
    assert e_rx < e_base


def test_naive_equals_grid_aware_on_uniform_grid():
    f = gaussian_mixture_field([[2.0], [-2.0]])
    grid = build_uniform_grid(1.0, 12)
    for spec in (euler(), heun()):
        for k in (2, 3, 4):
            a = sample(f, grid, spec, RxConfig(k=k), seed=2, batch=8).x0
            b = sample(f, grid, spec, RxConfig(k=k, mode="naive_richardson"), seed=2, batch=8).x0
            np.testing.assert_allclose(a, b, rtol=1e-12)


def test_seeded_prior_is_reproducible():
    f = gaussian_flow_field(2)
    grid = build_uniform_grid(1.0, 4)
    a = sample(f, grid, euler(), seed=7, batch=3)
    b = sample(f, grid, euler(), seed=7, batch=3)
    assert np.array_equal(a.x0, b.x0)


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_state_names_block():
    grid = build_uniform_grid(1.0, 4)
    with pytest.raises(NumericalFailure, match="block"):
        sample(linear_field(-1e308), grid, euler(), RxConfig(k=2), x_T=one(10.0))


def test_variable_kind_mismatch():
    with pytest.raises(InvalidArgument):
        sample(vp_gaussian_ddim_field(), build_uniform_grid(1.0, 4), euler(), x_T=one(1.0))


def test_ddim_field_runs_on_gamma_grid():
    f = vp_gaussian_ddim_field()
    grid = to_gamma_grid(np.linspace(0.2, 1.0, 11))
    y = one(1.0)
    exact = reference_endpoint(f, y, grid.T, grid.t_end)
    e_rx = abs(sample(f, grid, euler(), RxConfig(k=2), x_T=y).x0 - exact)[0]
    e_base = abs(sample(f, grid, euler(), RxConfig(mode="baseline_only"), x_T=y).x0 - exact)[0]
    assert e_rx < e_base


def test_report_serialization():
    grid = build_uniform_grid(1.0, 10)
    res = sample(gaussian_flow_field(), grid, adams_bashforth(2), RxConfig(k=2), x_T=one(1.0))
    d = res.to_dict()
    assert d["nfe"] == 10
    assert d["per_block"][0] == {"index": 0, "extrapolated": False, "fallback_reason": "insufficient stride history"}
    assert d["per_block"][1] == {"index": 1, "extrapolated": True}


def test_rk2_parameterized_family_extrapolates():
    grid = build_power_grid(1.0, 0.01, 8, 3.0)
    res = sample(gaussian_flow_field(), grid, rk2(0.25, 0.75, 2 / 3), RxConfig(k=2), x_T=one(1.0))
    assert all(b.extrapolated for b in res.blocks)


def _order(f, spec, k, grid_fn, extrapolated=True):
    ns = [10, 20, 40, 80, 160]
    x = f.sample_prior(np.random.default_rng(0), 1.0, 16)
    errs = []
    for N in ns:
        grid = grid_fn(N)
        cfg = RxConfig(k=k) if extrapolated else RxConfig(mode="baseline_only")
        out = sample(f, grid, spec, cfg, x_T=x).x0
        ref = reference_endpoint(f, x, grid.T, grid.t_end, finest_n=max(ns))
        errs.append(np.mean(np.linalg.norm(out - ref, axis=-1)))
    return -np.polyfit(np.log(ns), np.log(errs), 1)[0]


def test_rx_euler_second_order_on_nonlinear_field():
    f = gaussian_mixture_field([[2.0], [-2.0]], [0.3, 0.7])
    assert abs(_order(f, euler(), 2, lambda N: build_uniform_grid(1.0, N)) - 2.0) <= 0.25


def test_rx_euler_superconverges_on_gaussian_flow():
    # a uniform k=2 Euler block is the midpoint rule over 2h, whose h^3 term vanishes for this field
    f = gaussian_flow_field()
    assert _order(f, euler(), 2, lambda N: build_uniform_grid(1.0, N)) > 2.7
