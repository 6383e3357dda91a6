import numpy as np
import pytest

from mfcontrol.errors import UsageError
from mfcontrol.forward import simulate_ensemble
from mfcontrol.lq import (control_gap, degenerate_lq_oracle, direct_search,
                          linear_adjoint_ode, lq_fixed_point, lq_malliavin_control)
from mfcontrol.model import LQSpec, PlainLQSpec, builtin_model
from mfcontrol.paths import EMPTY_LEVY, TimeGrid, generate_ensemble

DEGENERATE = dict(A=0.1, C=1.0, D=0.2, F=0.1, S=(0.0,), I=(0.0,),
                  L=1.0, O=1.0, M=0.0, N_term=1.0, x0=1.0, h0=0.0, h1=0.0)


@pytest.fixture(scope="module")
def plain_noise20(grid20):
    return generate_ensemble(grid20, EMPTY_LEVY, n_paths=4000, seed=11)


@pytest.fixture(scope="module")
def oracle():
    return degenerate_lq_oracle(LQSpec(**DEGENERATE))


def test_oracle_value_stable_under_refinement(oracle):
    assert oracle.J == pytest.approx(0.0340726, abs=1e-4)
    coarse = degenerate_lq_oracle(LQSpec(**DEGENERATE), base_steps=20)
    assert coarse.J == pytest.approx(oracle.J, abs=1e-7)
    # optimality: nudging the control in either direction raises the cost
    for scale in (0.98, 1.02):
        spec = LQSpec(**DEGENERATE)
        times, v = oracle.times, oracle.v * scale
        from mfcontrol.lq import _rk4
        A, C, D, F = spec.A, spec.C, spec.D, spec.F

        def fwd(t, y):
            vt = np.interp(t, times, v)
            return np.array([A * y[0] + C * vt,
                             (2 * A + D * D) * y[1] + (D * y[0] + F * vt) ** 2])

        mS = _rk4(fwd, np.array([1.0, 0.0]), times)
        J = (0.5 * np.trapezoid(spec.L * mS[:, 1] + spec.O * v ** 2, times)
             + 0.5 * spec.N_term * mS[:, 1][-1])
        assert J > oracle.J - 1e-12


def test_oracle_rejects_nondegenerate():
    with pytest.raises(UsageError):
        degenerate_lq_oracle(LQSpec(**dict(DEGENERATE, h1=0.5)))
    with pytest.raises(UsageError):
        degenerate_lq_oracle(LQSpec(**dict(DEGENERATE, B=0.3)))


def test_linear_adjoint_ode_closed_form():
    A, L, N = 0.1, 1.0, 1.0
    times, P = linear_adjoint_ode(A, L, N)
    exact = (N + L / (2 * A)) * np.exp(2 * A * (1.0 - times)) - L / (2 * A)
    np.testing.assert_allclose(P, exact, rtol=1e-8)
    times, P0 = linear_adjoint_ode(0.0, L, N)
    np.testing.assert_allclose(P0, N + L * (1.0 - times), rtol=1e-10)


def test_fixed_point_matches_oracle(grid20, plain_noise20, oracle):
    report = lq_fixed_point(LQSpec(**DEGENERATE), plain_noise20)
    assert report.converged and not report.diverged and not report.trivial
    jf, ji = report.J_final, report.J_initial
    # monotone-ish descent and agreement with the deterministic optimum
    assert jf.value < ji.value + 3.0 * np.hypot(jf.se, ji.se)
    band = 3.0 * jf.se + 0.5 * grid20.dt * oracle.J
    assert abs(jf.value - oracle.J) < band, (jf.value, oracle.J)
    model = builtin_model("lq_meanfield", DEGENERATE, levy=EMPTY_LEVY)
    st = simulate_ensemble(model, report.final_policy, plain_noise20)
    assert control_gap(report.final_policy, oracle, st, plain_noise20) < 0.2 * grid20.dt * 20


def test_trivial_shortcut_when_control_free(grid12, noise12):
    spec = dict(A=0.1, C=0.0, D=0.2, F=0.0, S=(0.1,), I=(0.0,),
                L=1.0, O=1.0, M=0.7, N_term=1.0, x0=1.0, h0=0.0, h1=0.5)
    report = lq_fixed_point(spec, noise12)
    assert report.trivial and report.converged
    assert report.sweeps == []
    vals = report.final_policy.value(3, np.linspace(-1, 1, 7))
    np.testing.assert_allclose(vals, 0.7, rtol=1e-12)


def test_direct_search_recovers_trivial_control(grid12, noise12):
    spec = dict(A=0.1, C=0.0, D=0.2, F=0.0, S=(0.1,), I=(0.0,),
                L=1.0, O=1.0, M=0.5, N_term=1.0, x0=1.0, h0=0.0, h1=0.5)
    model = builtin_model("lq_meanfield", spec, levy=noise12.levy)
    policy, ce, ok = direct_search(model, noise12, n_blocks=4, budget=500)
    assert ok
    for i in (0, 5, 10):
        assert abs(policy.value(i, np.zeros(1))[0] - 0.5) < 0.02
    trivial = lq_fixed_point(spec, noise12)
    assert ce.value < trivial.J_final.value + 3.0 * np.hypot(ce.se, trivial.J_final.se) + 1e-4


def test_malliavin_route_requires_mean_field_free(meanfield_model, noise12):
    with pytest.raises(UsageError):
        lq_malliavin_control(meanfield_model, noise12)


def test_both_routes_agree():
    from conftest import ONE_MARK as levy
    grid = TimeGrid(T=1.0, N=10)
    noise = generate_ensemble(grid, levy, n_paths=2000, seed=9)
    spec = PlainLQSpec(A=0.1, B=1.0, C=0.2, D=0.1, Fz=(0.1,), Gz=(0.05,),
                      L=1.0, M=0.0, N_term=1.0, x0=1.0, h0=0.0, h1=0.5)
    model = builtin_model("lq_plain", spec, levy=levy)
    rep_m = lq_malliavin_control(model, noise, max_sweeps=6)
    rep_b = lq_fixed_point(model, noise, max_sweeps=6)
    # two independent characterizations of the same optimum on the same draws
    assert abs(rep_m.J_final.value - rep_b.J_final.value) < 1e-3
    Y = np.linspace(-0.5, 0.5, 11)
    for i in (0, 4, 8):
        d = rep_m.final_policy.value(i, Y) - rep_b.final_policy.value(i, Y)
        assert float(np.abs(d).max()) < 0.05, (i, d)
