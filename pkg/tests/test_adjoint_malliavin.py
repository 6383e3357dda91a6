import numpy as np
import pytest

from mfcontrol.adjoint_malliavin import (flow_exponent, fundamental_solution,
                                         hv_stationarity, malliavin_adjoint)
from mfcontrol.cost import gateaux_of_cost
from mfcontrol.errors import DegeneracyError, UsageError
from mfcontrol.forward import simulate_ensemble
from mfcontrol.model import (AffineCoefficient, AffineJump,
                             AffineObservation, ControlPolicy, Identity,
                             ModelSpec, QuadraticRunningCost,
                             QuadraticTerminalCost, builtin_model)
from mfcontrol.paths import EMPTY_LEVY, TimeGrid, generate_ensemble

from conftest import ONE_MARK, PLAIN_PARAMS


@pytest.fixture(scope="module")
def base(plain_model, grid12, noise12):
    pol = ControlPolicy.constant(0.1, grid12)
    st = simulate_ensemble(plain_model, pol, noise12)
    return pol, st


def test_flow_property_exact(plain_model, grid12, noise12, base):
    _, st = base
    G05 = fundamental_solution(plain_model, st, noise12, 0, 5)
    G59 = fundamental_solution(plain_model, st, noise12, 5, 9)
    G09 = fundamental_solution(plain_model, st, noise12, 0, 9)
    np.testing.assert_allclose(G05 * G59, G09, rtol=1e-12)
    np.testing.assert_allclose(
        fundamental_solution(plain_model, st, noise12, 4, 4), 1.0)
    with pytest.raises(UsageError):
        fundamental_solution(plain_model, st, noise12, 5, 4)


def test_constant_coefficient_flow_is_exponential(grid12):
    a = 0.37
    model = builtin_model("lq_plain",
                          dict(A=a, B=1.0, C=0.0, D=0.0, L=1.0, N_term=1.0))
    noise = generate_ensemble(grid12, EMPTY_LEVY, n_paths=50, seed=3)
    pol = ControlPolicy.constant(0.1, grid12)
    st = simulate_ensemble(model, pol, noise)
    G = fundamental_solution(model, st, noise, 2, 10)
    np.testing.assert_allclose(G, np.exp(a * (grid12.times[10] - grid12.times[2])),
                               rtol=1e-12)


def test_degenerate_jump_slope_rejected(grid12):
    levy = ONE_MARK
    model = builtin_model("lq_plain",
                          dict(A=0.1, B=1.0, Fz=(-1.5,), L=1.0, N_term=1.0),
                          levy=levy)
    noise = generate_ensemble(grid12, levy, n_paths=50, seed=4)
    pol = ControlPolicy.constant(0.1, grid12)
    st = simulate_ensemble(model, pol, noise)
    with pytest.raises(DegeneracyError):
        flow_exponent(model, st, noise)


def test_zero_cost_means_zero_adjoints(grid12):
    model = ModelSpec(b=AffineCoefficient(cx=0.1, cv=1.0),
                      sigma=AffineCoefficient(c0=0.2),
                      gamma=AffineJump(1, cx=(0.1,)),
                      h=AffineObservation(0.0, 0.5),
                      l=QuadraticRunningCost(L=0.0, O=0.0, M=0.0),
                      phi=QuadraticTerminalCost(N=0.0),
                      f=Identity(), g=Identity(), x0=1.0, levy=ONE_MARK)
    noise = generate_ensemble(grid12, ONE_MARK, n_paths=60, seed=5)
    pol = ControlPolicy.constant(0.1, grid12)
    adj = malliavin_adjoint(model, pol, noise, with_kr=True)
    assert np.allclose(adj.Sigma, 0) and np.allclose(adj.Pi, 0)
    assert np.allclose(adj.q, 0) and np.allclose(adj.k, 0)
    assert np.allclose(adj.r, 0)


def test_q_terminal_equals_sigma_terminal(plain_model, noise12, base):
    pol, _ = base
    adj = malliavin_adjoint(plain_model, pol, noise12, with_kr=False)
    np.testing.assert_allclose(adj.q[:, -1], adj.Sigma[:, -1], rtol=1e-12)


def test_sigma_matches_direct_quadrature(grid12):
    # no control response in diffusion/jumps, no terminal cost, and an
    # uninformative observation (rho = 1): the mean-field gradient term
    # vanishes by the sample-mean identity and Sigma(t) reduces to the
    # running-cost quadrature int_t^T (x - mean) ds pathwise
    model = builtin_model("lq_plain",
                          dict(A=0.1, B=1.0, C=0.2, D=0.0, L=1.0, N_term=0.0,
                               h1=0.0))
    noise = generate_ensemble(grid12, EMPTY_LEVY, n_paths=500, seed=6)
    pol = ControlPolicy.constant(0.1, grid12)
    st = simulate_ensemble(model, pol, noise)
    adj = malliavin_adjoint(model, pol, noise, with_kr=False)
    dt = grid12.dt
    vals = np.column_stack([st.x[:, i] - st.x[:, i].mean()
                            for i in range(grid12.N + 1)])
    for idx in (0, 4, 9):
        integ = np.trapezoid(vals[:, idx:], dx=dt, axis=1)
        np.testing.assert_allclose(adj.Sigma[:, idx], integ, rtol=1e-9,
                                   atol=1e-12)


def test_lambda_is_h_times_pi(plain_model, grid12, noise12, base):
    pol, st = base
    adj = malliavin_adjoint(plain_model, pol, noise12, with_kr=False)
    i = 5
    h = plain_model.h.val(grid12.times[i], st.x[:, i])
    np.testing.assert_allclose(adj.Lambda[:, i], h * adj.Pi[:, i], rtol=1e-12)


def test_adjoint_reproduces_cost_gradient(plain_model, grid12, noise12, base):
    """E[int H_v d dt] must equal the Gateaux derivative of J."""
    pol, st = base
    adj = malliavin_adjoint(plain_model, pol, noise12, with_kr=True)
    d = ControlPolicy.constant(1.0, grid12)
    n = noise12.n_paths
    rates = ONE_MARK.rates
    dt = grid12.dt
    hv = np.zeros((n, grid12.N))
    for i in range(grid12.N):
        t = grid12.times[i]
        xi = st.x[:, i]
        u = st.controls[:, i]
        E0f = float((st.rho[:, i] * plain_model.f.val(xi)).mean())
        hv[:, i] = (plain_model.b.dv(t, xi, st.mean[i], u) * adj.q[:, i]
                    + plain_model.sigma.dv(t, xi, st.mean[i], u) * adj.k[:, i]
                    + (adj.r[:, i, :] * plain_model.gamma.dv(t, xi, st.mean[i], u)
                       * rates).sum(axis=1)
                    + plain_model.l.dv(t, xi, E0f, u) * st.rho[:, i])
    per = hv.sum(axis=1) * dt
    lhs, lhs_se = per.mean(), per.std(ddof=1) / np.sqrt(n)
    g = gateaux_of_cost(plain_model, pol, d, noise12)
    rhs, rhs_se = g["analytic"]
    assert abs(lhs - rhs) <= 3 * np.hypot(lhs_se, rhs_se) + 0.5 * dt * abs(rhs)


def test_hv_stationarity_zero_for_control_free_model(grid12):
    model = ModelSpec(b=AffineCoefficient(cx=0.1),
                      sigma=AffineCoefficient(c0=0.2),
                      gamma=AffineJump(1, cx=(0.1,)),
                      h=AffineObservation(0.0, 0.5),
                      l=QuadraticRunningCost(L=1.0, O=0.0, M=0.0),
                      phi=QuadraticTerminalCost(N=1.0),
                      f=Identity(), g=Identity(), x0=1.0, levy=ONE_MARK)
    noise = generate_ensemble(grid12, ONE_MARK, n_paths=200, seed=8)
    pol = ControlPolicy.constant(0.1, grid12)
    st = simulate_ensemble(model, pol, noise)
    adj = malliavin_adjoint(model, pol, noise, with_kr=True)
    rows = hv_stationarity(model, pol, adj, st, noise)
    assert np.max(rows[:, 1]) < 1e-10


def test_mean_field_model_rejected(meanfield_model, grid12, noise12):
    pol = ControlPolicy.constant(0.1, grid12)
    with pytest.raises(UsageError):
        malliavin_adjoint(meanfield_model, pol, noise12)
