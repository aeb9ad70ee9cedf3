import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weaksde.convergence import DegenerateFit, consistency_slope
from weaksde.models import SdeProblem, make_fhn_model, make_ou_model, make_quintic_model
from weaksde.rng import StreamBatch, derive_stream
from weaksde.schemes import (
    NewtonDivergence,
    SchemeKind,
    SchemeSpec,
    modify,
    modify_bs,
    modify_bts,
    modify_dte,
    modify_fte1,
    modify_fte2,
    modify_mes,
    simulate_batch,
    simulate_trajectory,
    solve_backward_euler,
    step,
    step_backward_euler,
    step_euler_maruyama,
    step_modified_euler,
)

QUINTIC = make_quintic_model()
X0 = np.array([0.0])
FIXED_POINTS = [-1.0, -0.75, -0.5, -0.25, -0.1, 0.25, 0.5, 0.75, 1.0, 1.1]
LADDER = [2.0**-k for k in range(4, 13)]


def zero_problem(d=2, m=2):
    return SdeProblem(
        "zero", d, m,
        lambda x: np.zeros_like(x),
        lambda x: np.zeros(np.shape(x) + (m,)),
        np.arange(1.0, d + 1.0),
    )


# -- spec arithmetic ---------------------------------------------------------

def test_euler_maruyama_example():
    assert step_euler_maruyama(QUINTIC, X0, 0.5, np.zeros(1))[0] == 0.5


def test_fte1_example():
    mod = modify_fte1(QUINTIC, X0, 1.0, SchemeSpec(SchemeKind.FTE1))
    assert mod.f_bar[0] == pytest.approx(1 / 6)
    assert mod.g_bar[0, 0] == pytest.approx(1 / 3)


def test_fte2_examples():
    spec = SchemeSpec(SchemeKind.FTE2)
    mod = modify_fte2(QUINTIC, X0, 0.3, spec)
    assert (mod.f_bar[0], mod.g_bar[0, 0]) == (1.0, 2.0)
    mod = modify_fte2(QUINTIC, np.array([2.0]), 1.0, spec)
    f = QUINTIC.drift(np.array([2.0]))[0]
    assert mod.f_bar[0] == pytest.approx(f / 17)


def test_mes_example():
    mod = modify_mes(QUINTIC, X0, 1.0)
    assert (mod.f_bar[0], mod.g_bar[0, 0]) == (0.5, 1.0)


def test_dte_example():
    mod = modify_dte(QUINTIC, X0, 1.0)
    assert (mod.f_bar[0], mod.g_bar[0, 0]) == (0.5, 2.0)


def test_bts_example():
    mod = modify_bts(QUINTIC, X0, 1.0, np.zeros(1))
    assert (mod.f_bar[0], mod.g_bar[0, 0]) == (0.5, 1.0)


def test_bts_uses_euclidean_norm_of_g_dw():
    fhn = make_fhn_model()
    x = np.array([1.0, 2.0])
    dW = np.array([0.3, -0.4])
    mod = modify_bts(fhn, x, 0.1, dW)
    f = fhn.drift(x)
    gdw = fhn.diffusion(x) @ dW
    expected = 1 + 0.1 * np.linalg.norm(f) + np.linalg.norm(gdw)
    assert np.allclose(mod.f_bar, f / expected)
    with pytest.raises(ValueError):
        modify(fhn, x, 0.1, SchemeSpec(SchemeKind.BTS))


def test_modified_euler_example():
    y = step_modified_euler(QUINTIC, X0, 1.0, np.zeros(1), SchemeSpec(SchemeKind.MES))
    assert y[0] == 0.5
    with pytest.raises(ValueError):
        step_modified_euler(QUINTIC, X0, 1.0, np.zeros(1), SchemeSpec(SchemeKind.BEM))


def test_balanced_bounds_and_zero_drift():
    rng = np.random.default_rng(4)
    for _ in range(200):
        x = rng.uniform(-10, 10, size=1)
        h = 2.0 ** rng.uniform(-12, -1)
        mod = modify_bs(QUINTIC, x, h)
        assert np.all(np.abs(mod.f_bar) <= 1 / h)
        assert np.all(np.abs(mod.g_bar) <= 1 / math.sqrt(h))
    flat = make_ou_model(rate=1.0)
    assert modify_bs(flat, np.zeros(1), 0.1).f_bar[0] == 0.0


def test_dte_bound_and_untouched_diffusion():
    rng = np.random.default_rng(5)
    fhn = make_fhn_model()
    for _ in range(200):
        x = rng.uniform(-10, 10, size=2)
        h = 2.0 ** rng.uniform(-12, -1)
        mod = modify_dte(fhn, x, h)
        f = np.linalg.norm(fhn.drift(x))
        assert np.linalg.norm(mod.f_bar) <= min(1 / h, f) * (1 + 1e-12)
        assert np.array_equal(mod.g_bar, fhn.diffusion(x))


def test_parameter_ranges_enforced():
    with pytest.raises(ValueError):
        SchemeSpec(SchemeKind.FTE1, alpha1=0.6)
    with pytest.raises(ValueError):
        SchemeSpec(SchemeKind.FTE2, vartheta=0.0)
    with pytest.raises(ValueError):
        SchemeSpec.from_id("rk4")
    assert SchemeSpec.from_id("FTE1", alpha2=0.25).id == "fte1"


def test_nonpositive_step_rejected():
    with pytest.raises(ValueError):
        modify_mes(QUINTIC, X0, 0.0)


# -- taming dominance ----------------------------------------------------------

@pytest.mark.parametrize("kind", [SchemeKind.FTE1, SchemeKind.FTE2, SchemeKind.MES])
@pytest.mark.parametrize("factory", [make_quintic_model, make_fhn_model])
def test_dominance_random_cases(kind, factory):
    problem = factory()
    spec = SchemeSpec(kind)
    rng = np.random.default_rng(6)
    n = 10_000
    direction = rng.standard_normal((n, problem.dim_state))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    x = direction * rng.uniform(0, 10, size=(n, 1))
    h = 2.0 ** rng.uniform(-12, -1, size=n)
    for xi, hi in zip(x, h):
        mod = modify(problem, xi, hi, spec)
        assert np.linalg.norm(mod.f_bar) <= np.linalg.norm(problem.drift(xi))
        assert np.linalg.norm(mod.g_bar) <= np.linalg.norm(problem.diffusion(xi))


@settings(max_examples=300, deadline=None)
@given(
    x=st.floats(-10, 10),
    k=st.floats(1, 12),
    kind=st.sampled_from([SchemeKind.FTE1, SchemeKind.FTE2, SchemeKind.MES, SchemeKind.DTE, SchemeKind.BTS]),
    w=st.floats(-3, 3),
)
def test_dominance_property(x, k, kind, w):
    h = 2.0**-k
    xs = np.array([x])
    mod = modify(QUINTIC, xs, h, SchemeSpec(kind), dW=np.array([w * math.sqrt(h)]))
    assert abs(mod.f_bar[0]) <= abs(QUINTIC.drift(xs)[0])
    assert abs(mod.g_bar[0, 0]) <= abs(QUINTIC.diffusion(xs)[0, 0])
    assert np.isfinite(mod.f_bar).all() and np.isfinite(mod.g_bar).all()


# -- consistency order -----------------------------------------------------------

@pytest.mark.parametrize("kind", [SchemeKind.MES, SchemeKind.DTE, SchemeKind.BS])
def test_first_order_modifiers_consistency(kind):
    for x in FIXED_POINTS:
        assert abs(consistency_slope(QUINTIC, SchemeSpec(kind), [x], LADDER) - 1.0) <= 0.1


def test_fte2_consistency():
    for x in FIXED_POINTS:
        assert abs(consistency_slope(QUINTIC, SchemeSpec(SchemeKind.FTE2), [x], LADDER) - 0.5) <= 0.1


def test_fte1_asymptotic_consistency():
    # h^(1/2) |f| + h^(1/2) ||g||^2 is O(1) on the ladder above, so check far out
    fine = [2.0**-k for k in range(30, 39)]
    for x in FIXED_POINTS:
        assert consistency_slope(QUINTIC, SchemeSpec(SchemeKind.FTE1), [x], fine) == pytest.approx(0.5, abs=0.01)


def test_bs_drift_discrepancy_is_second_order():
    x = np.array([1.0])
    errs = [abs(modify_bs(QUINTIC, x, h).f_bar[0] - QUINTIC.drift(x)[0]) for h in LADDER]
    slope = np.polyfit(np.log2(LADDER), np.log2(errs), 1)[0]
    assert slope == pytest.approx(2.0, abs=0.05)


def test_inactive_taming_gives_degenerate_fit():
    with pytest.raises(DegenerateFit):
        consistency_slope(QUINTIC, SchemeSpec(SchemeKind.FTE2), [0.0], LADDER)


def test_bts_expected_discrepancy_half_order():
    z = np.random.default_rng(8).standard_normal(10_000)
    x = np.array([[0.5]])
    errs = []
    for h in LADDER:
        dW = (z * math.sqrt(h))[:, None]
        mod = modify(QUINTIC, np.repeat(x, z.size, axis=0), h, SchemeSpec(SchemeKind.BTS), dW=dW)
        errs.append(np.mean(np.abs(mod.g_bar[:, 0, 0] - QUINTIC.diffusion(x)[0, 0, 0])))
    slope = np.polyfit(np.log2(LADDER), np.log2(errs), 1)[0]
    assert slope >= 0.4


# -- backward Euler ----------------------------------------------------------------

def test_bem_linear_ou_example():
    ou = make_ou_model(rate=2.0)
    y, ok, iters = solve_backward_euler(ou, np.array([[1.0]]), 0.5, np.zeros((1, 1)), SchemeSpec(SchemeKind.BEM))
    assert ok[0] and y[0, 0] == pytest.approx(0.5, abs=1e-15)
    # one update lands on the root, the second confirms it
    assert iters[0] <= 2


def test_bem_zero_drift_is_explicit():
    ou = make_ou_model(rate=1e-300, vol=1.5)
    y, ok, iters = solve_backward_euler(ou, np.array([[0.7]]), 0.25, np.array([[0.2]]), SchemeSpec(SchemeKind.BEM))
    assert ok[0] and y[0, 0] == pytest.approx(0.7 + 1.5 * 0.2)
    assert iters[0] == 1


def test_bem_residual_small_fhn():
    fhn = make_fhn_model()
    spec = SchemeSpec(SchemeKind.BEM)
    rng = np.random.default_rng(9)
    x = rng.uniform(-3, 3, size=(200, 2))
    dW = rng.standard_normal((200, 2)) * 0.1
    y, ok, _ = solve_backward_euler(fhn, x, 0.01, dW, spec)
    b = x + np.einsum("bij,bj->bi", fhn.diffusion(x), dW)
    assert ok.all()
    assert np.abs(y - 0.01 * fhn.drift(y) - b).max() < 1e-8


def test_bem_without_analytic_jacobian():
    no_jac = make_quintic_model()
    from dataclasses import replace
    no_jac = replace(no_jac, drift_jacobian=None)
    spec = SchemeSpec(SchemeKind.BEM)
    x = np.array([[1.5], [-2.0]])
    dW = np.array([[0.1], [-0.05]])
    a = solve_backward_euler(no_jac, x, 2**-6, dW, spec)[0]
    b = solve_backward_euler(QUINTIC, x, 2**-6, dW, spec)[0]
    assert np.allclose(a, b, atol=1e-8)


def test_bem_contraction_quintic():
    spec = SchemeSpec(SchemeKind.BEM)
    rng = np.random.default_rng(10)
    n = 100_000
    x = rng.uniform(-5, 5, size=(n, 1))
    h = 2.0 ** rng.uniform(-10, -4, size=(n, 1))
    dW = rng.standard_normal((n, 1)) * np.sqrt(h)
    worst = 0
    for hv in np.unique(np.round(np.log2(h[:, 0]))):
        rows = np.round(np.log2(h[:, 0])) == hv
        y, ok, iters = solve_backward_euler(QUINTIC, x[rows], 2.0**hv, dW[rows], spec)
        assert ok.all()
        worst = max(worst, int(iters.max()))
    assert worst <= 10


def test_bem_divergence_raises():
    spec = SchemeSpec(SchemeKind.BEM, newton_max_iter=1)
    with pytest.raises(NewtonDivergence):
        step_backward_euler(QUINTIC, np.array([3.0]), 0.5, np.zeros(1), spec)


def test_batch_rows_are_independent():
    spec = SchemeSpec(SchemeKind.BEM)
    x = np.array([[0.1], [4.0], [-3.0]])
    dW = np.array([[0.01], [0.2], [-0.1]])
    together = solve_backward_euler(QUINTIC, x, 2**-5, dW, spec)[0]
    for k in range(3):
        alone = solve_backward_euler(QUINTIC, x[k:k + 1], 2**-5, dW[k:k + 1], spec)[0]
        assert np.array_equal(alone[0], together[k])


# -- trajectories ------------------------------------------------------------------

@pytest.mark.parametrize("kind", list(SchemeKind))
def test_zero_coefficients_are_fixed_point(kind):
    problem = zero_problem()
    res = simulate_batch(problem, SchemeSpec(kind), 16, StreamBatch.from_range(1, 0, 4))
    assert np.array_equal(res.states, np.tile(problem.initial_state, (4, 1)))
    assert not res.exploded.any()


def test_vol_zero_ou_bem_terminal():
    ou = make_ou_model(rate=2.0, vol=0.0, x0=1.0)
    path = simulate_trajectory(ou, SchemeSpec(SchemeKind.BEM), 2**10, derive_stream(100, 0))
    # independent oracle: the implicit Euler recurrence y <- y / (1 + 2h)
    oracle = (1.0 / (1.0 + 2.0 * 2.0**-10)) ** (2**10)
    assert path.state[0] == pytest.approx(oracle, abs=1e-12)
    assert abs(path.state[0] - math.exp(-2.0)) < 1e-3


@pytest.mark.parametrize("kind", list(SchemeKind))
def test_single_step_mesh_matches_one_step(kind):
    spec = SchemeSpec(kind)
    fhn = make_fhn_model(initial_state=(0.3, -0.2))
    path = simulate_trajectory(fhn, spec, 1, derive_stream(100, 4))
    dW = derive_stream(100, 4).standard_normals(2)[0]
    assert np.allclose(path.state, step(fhn, spec, fhn.initial_state, 1.0, dW), rtol=0, atol=1e-12)


def test_em_explodes_from_large_initial_state():
    problem = make_quintic_model(initial_state=8.0)
    path = simulate_trajectory(problem, SchemeSpec(SchemeKind.EM), 2**10, derive_stream(100, 0))
    assert path.exploded
    assert path.steps_taken < 2**10


def test_bem_stable_from_large_initial_state():
    problem = make_quintic_model(initial_state=8.0)
    res = simulate_batch(problem, SchemeSpec(SchemeKind.BEM), 2**10, StreamBatch.from_range(100, 0, 64))
    assert not res.exploded.any()
    assert res.max_newton_iter.max() <= 10


def test_batch_result_independent_of_batch_composition():
    spec = SchemeSpec(SchemeKind.MES)
    whole = simulate_batch(QUINTIC, spec, 32, StreamBatch.from_range(100, 10, 6))
    part = simulate_batch(QUINTIC, spec, 32, StreamBatch.from_range(100, 13, 2))
    assert np.array_equal(whole.states[3:5], part.states)


def test_bs_matches_high_precision_tanh():
    import mpmath

    mpmath.mp.dps = 50
    for x in (0.5, 1.0, 1.3):
        xs = np.array([x])
        f = QUINTIC.drift(xs)[0]
        g = QUINTIC.diffusion(xs)[0, 0]
        for h in LADDER:
            mod = modify_bs(QUINTIC, xs, h)
            hp = mpmath.mpf(h)
            f_ref = mpmath.tanh(hp * mpmath.mpf(f)) / hp
            g_ref = mpmath.tanh(mpmath.sqrt(hp) * mpmath.mpf(g)) / mpmath.sqrt(hp)
            assert mod.f_bar[0] == pytest.approx(float(f_ref), rel=1e-14)
            assert mod.g_bar[0, 0] == pytest.approx(float(g_ref), rel=1e-14)
            # leading Taylor term of the drift discrepancy is -h^2 f^3 / 3
            assert float(f_ref - f) == pytest.approx(-(h**2) * f**3 / 3, rel=0.05)


@pytest.mark.parametrize("kind", list(SchemeKind))
@pytest.mark.parametrize("factory", [make_fhn_model, make_ou_model, lambda: make_quintic_model(8.0)])
def test_compiled_path_matches_numpy_path(kind, factory):
    from dataclasses import replace

    problem = factory()
    plain = replace(problem, kernel=None)
    a = simulate_batch(problem, SchemeSpec(kind), 64, StreamBatch.from_range(100, 0, 128))
    b = simulate_batch(plain, SchemeSpec(kind), 64, StreamBatch.from_range(100, 0, 128))
    assert np.array_equal(a.exploded, b.exploded)
    assert np.array_equal(a.steps_taken, b.steps_taken)
    assert np.array_equal(a.max_newton_iter, b.max_newton_iter)
    live = ~a.exploded
    assert np.allclose(a.states[live], b.states[live], rtol=1e-13, atol=1e-13)
