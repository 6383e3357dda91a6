import numpy as np
import pytest

from mfcontrol.adjoint_bsde import (hamiltonian, solve_bsde_PQ, solve_bsde_p,
                                    variational_inequality)
from mfcontrol.cost import gateaux_of_cost, pathwise_cost
from mfcontrol.errors import ConvergenceError
from mfcontrol.forward import simulate_ensemble
from mfcontrol.lq import linear_adjoint_ode
from mfcontrol.model import ControlPolicy, builtin_model
from mfcontrol.paths import EMPTY_LEVY, TimeGrid, generate_ensemble

from conftest import constant_policy


@pytest.fixture(scope="module")
def meanfield_solution(meanfield_model, grid12, noise12):
    pol = constant_policy(grid12, 0.3)
    st = simulate_ensemble(meanfield_model, pol, noise12)
    sol = solve_bsde_p(meanfield_model, st, noise12)
    return pol, st, sol


def test_terminal_conditions(meanfield_model, meanfield_solution):
    _, st, sol = meanfield_solution
    xT = st.x[:, -1]
    rhoT = st.rho[:, -1]
    E0_g = float((rhoT * meanfield_model.g.val(xT)).mean())
    E0_phi_y = float((rhoT * meanfield_model.phi.dy(xT, E0_g)).mean())
    P_term = meanfield_model.phi.val(xT, E0_g) + meanfield_model.g.val(xT) * E0_phi_y
    p_term = rhoT * (meanfield_model.phi.dx(xT, E0_g)
                     + meanfield_model.g.d(xT) * E0_phi_y)
    np.testing.assert_allclose(sol.P[:, -1], P_term, rtol=1e-12)
    np.testing.assert_allclose(sol.p[:, -1], p_term, rtol=1e-12)


def test_P0_mean_matches_cost(meanfield_model, grid12, noise12, meanfield_solution):
    # the backward aggregate started from the terminal cost rolls the running
    # cost up, so its time-zero average reproduces the cost estimate up to
    # regression bias and the trapezoid-vs-rectangle time discretization
    _, st, sol = meanfield_solution
    j = pathwise_cost(meanfield_model, st)
    se = float(j.std(ddof=1) / np.sqrt(j.size))
    diff = abs(float(sol.P[:, 0].mean()) - float(j.mean()))
    assert diff < 3.0 * se + 0.5 * grid12.dt * abs(float(j.mean()))


def test_p_matches_linear_adjoint_ode():
    # no state diffusion, no jumps, uninformative observation: the state
    # adjoint is P(t) (x - mean) with P solving the scalar backward ODE
    grid = TimeGrid(T=1.0, N=20)
    noise = generate_ensemble(grid, EMPTY_LEVY, n_paths=4000, seed=7)
    model = builtin_model("lq_plain",
                          dict(A=0.1, B=1.0, C=0.0, D=0.3, Fz=(0.0,),
                               Gz=(0.0,), L=1.0, N_term=1.0, h1=0.0))
    pol = ControlPolicy.constant(0.4, grid)
    st = simulate_ensemble(model, pol, noise)
    sol = solve_bsde_p(model, st, noise)
    times, P = linear_adjoint_ode(0.1, 1.0, 1.0)
    for i in (5, 10, 15):
        pred = np.interp(grid.times[i], times, P) * (st.x[:, i] - st.mean[i])
        err = np.linalg.norm(sol.p[:, i] - pred) / np.linalg.norm(pred)
        assert err < 0.06, (i, err)


def test_single_sweep_without_mean_field(plain_model, grid12, noise12):
    st = simulate_ensemble(plain_model, constant_policy(grid12, 0.2), noise12)
    sol = solve_bsde_p(plain_model, st, noise12)
    assert sol.sweeps == 1


@pytest.fixture(scope="module")
def coupled_states(grid12, noise12):
    # nonzero mean coupling in drift and diffusion forces real Picard updates
    from conftest import MEANFIELD_PARAMS
    model = builtin_model("lq_meanfield",
                          dict(MEANFIELD_PARAMS, B=0.4, E=0.2),
                          levy=noise12.levy)
    st = simulate_ensemble(model, constant_policy(grid12, 0.3), noise12)
    return model, st


def test_picard_settles_with_mean_field(coupled_states, noise12):
    model, st = coupled_states
    sol = solve_bsde_p(model, st, noise12)
    assert 1 < sol.sweeps <= 10
    assert sol.picard_moves[-1] < 1e-3
    assert sol.picard_moves[-1] < sol.picard_moves[0]


def test_picard_budget_error(coupled_states, noise12):
    model, st = coupled_states
    with pytest.raises(ConvergenceError):
        solve_bsde_p(model, st, noise12, max_sweeps=1)


def test_hamiltonian_control_derivative(meanfield_model, noise12, meanfield_solution):
    # H is quadratic in the control, so a central difference is exact
    _, st, sol = meanfield_solution
    eps = 1e-3
    for i in (0, 6, 11):
        v = st.controls[:, i]
        _, hv = hamiltonian(meanfield_model, sol, st, noise12, i)
        Hp, _ = hamiltonian(meanfield_model, sol, st, noise12, i, v=v + eps)
        Hm, _ = hamiltonian(meanfield_model, sol, st, noise12, i, v=v - eps)
        np.testing.assert_allclose((Hp - Hm) / (2 * eps), hv,
                                   rtol=1e-7, atol=1e-10)


def test_variational_rows_match_gateaux(meanfield_model, grid12, noise12,
                                        meanfield_solution):
    pol, st, sol = meanfield_solution
    direction = constant_policy(grid12, 1.0)
    up = pol.perturbed(direction, 1.0)
    rows = variational_inequality(meanfield_model, pol, up, st, sol, noise12)
    total = float((rows[:, 1]).sum() * grid12.dt)
    total_se = float(np.sqrt((rows[:, 2] ** 2).sum()) * grid12.dt)
    out = gateaux_of_cost(meanfield_model, pol, direction, noise12)
    ana, ana_se = out["analytic"]
    band = 3.0 * np.hypot(total_se, ana_se) + 0.5 * grid12.dt * abs(ana)
    assert abs(total - ana) < band, (total, ana, band)
    # reversing the direction negates every row exactly
    down = pol.perturbed(direction, -1.0)
    rows_dn = variational_inequality(meanfield_model, pol, down, st, sol, noise12)
    np.testing.assert_allclose(rows_dn[:, 1], -rows[:, 1], rtol=1e-12)
    assert total > 3.0 * total_se
