"""Backward-equation adjoints via least-squares Monte Carlo.

Two backward systems are solved on the simulated forward ensemble:

* (P, Q, G): carries the reweighted cost aggregate backward against the
  observation noise and the jump measure; and
* (p, q, R): the state adjoint, whose driver couples the coefficient
  gradients, the observation term through Q, and expectation terms coming
  from the mean-field dependence of the dynamics.

The mean-field expectation terms in the (p, q, R) driver depend on the
solution itself, so they are frozen per backward sweep and refreshed by
Picard iteration.  Without mean field in the dynamics the first sweep is
already exact (the frozen terms are identically zero).

Conditional expectations are estimated by ridge regression on a degree-2
basis over (x - mean, Y), which is exact for the linear-quadratic models up
to Monte Carlo error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError
from .forward import StateEnsemble
from .model import ModelSpec
from .paths import NoiseEnsemble
from .regression import ConditionalEstimator, fit_ls, state_features

__all__ = ["BsdeSolution", "solve_bsde_PQ", "solve_bsde_p", "hamiltonian",
           "variational_inequality"]


@dataclass
class BsdeSolution:
    """Pathwise backward solutions on the simulation grid.

    P, p live on grid points (n, N+1); Q, q on cells (n, N); G, R on cells
    per mark (n, N, m).
    """

    P: np.ndarray
    Q: np.ndarray
    G: np.ndarray
    p: np.ndarray | None = None
    q: np.ndarray | None = None
    R: np.ndarray | None = None
    sweeps: int = 0
    picard_moves: list = field(default_factory=list)


def _frozen_cost_means(model: ModelSpec, states: StateEnsemble, controls_pad):
    """rho-weighted ensemble means used as mean-field constants."""
    times = states.grid.times
    rhoT = states.rho[:, -1]
    xT = states.x[:, -1]
    E0_g = float((rhoT * model.g.val(xT)).mean())
    E0_phi_y = float((rhoT * model.phi.dy(xT, E0_g)).mean())
    E0_f = np.empty(len(times))
    E0_ly = np.empty(len(times))
    for i, t in enumerate(times):
        xi = states.x[:, i]
        E0_f[i] = float((states.rho[:, i] * model.f.val(xi)).mean())
        E0_ly[i] = float((states.rho[:, i]
                          * model.l.dy(t, xi, E0_f[i], controls_pad[:, i])).mean())
    return E0_g, E0_phi_y, E0_f, E0_ly


def _pad(controls):
    return np.concatenate([controls, controls[:, -1:]], axis=1)


def solve_bsde_PQ(model: ModelSpec, states: StateEnsemble, noise: NoiseEnsemble,
                  ridge: float = 1e-8) -> BsdeSolution:
    """Backward solve of the cost-aggregate system (P, Q, G)."""
    grid = noise.grid
    n, N, dt = noise.n_paths, grid.N, grid.dt
    m = noise.counts.shape[2]
    rates = noise.levy.rates if noise.levy.n_marks else np.zeros(m)
    u = _pad(states.controls)
    E0_g, E0_phi_y, E0_f, E0_ly = _frozen_cost_means(model, states, u)

    P = np.empty((n, N + 1))
    Q = np.zeros((n, N))
    G = np.zeros((n, N, m))
    xT = states.x[:, -1]
    P[:, N] = model.phi.val(xT, E0_g) + model.g.val(xT) * E0_phi_y
    for i in range(N - 1, -1, -1):
        t = grid.times[i]
        xi = states.x[:, i]
        X = state_features(xi, states.Y[:, i], states.mean[i])
        _, cont = fit_ls(X, P[:, i + 1], ridge)
        _, qy = fit_ls(X, P[:, i + 1] * noise.dY[:, i], ridge)
        Q[:, i] = qy / dt
        for mk in range(noise.levy.n_marks):
            comp = noise.counts[:, i, mk] - rates[mk] * dt
            _, gj = fit_ls(X, P[:, i + 1] * comp, ridge)
            G[:, i, mk] = gj / (rates[mk] * dt)
        driver = (model.l.val(t, xi, E0_f[i], u[:, i])
                  + model.f.val(xi) * E0_ly[i])
        P[:, i] = cont + driver * dt
    return BsdeSolution(P=P, Q=Q, G=G)


def solve_bsde_p(model: ModelSpec, states: StateEnsemble, noise: NoiseEnsemble,
                 pq: BsdeSolution | None = None, ridge: float = 1e-8,
                 max_sweeps: int = 10, tol: float = 1e-3) -> BsdeSolution:
    """Backward solve of the state adjoint (p, q, R) with Picard-frozen
    mean-field driver terms; returns the (P, Q, G) triple alongside."""
    pq = pq or solve_bsde_PQ(model, states, noise, ridge)
    grid = noise.grid
    n, N, dt = noise.n_paths, grid.N, grid.dt
    m = noise.counts.shape[2]
    rates = noise.levy.rates if noise.levy.n_marks else np.zeros(m)
    u = _pad(states.controls)
    E0_g, E0_phi_y, E0_f, E0_ly = _frozen_cost_means(model, states, u)

    xT = states.x[:, -1]
    rhoT = states.rho[:, -1]
    p_term = rhoT * (model.phi.dx(xT, E0_g) + model.g.d(xT) * E0_phi_y)

    # frozen mean-field driver means: E[b_y p], E[sigma_y q], E[gamma_y R]
    mb = np.zeros(N + 1)
    ms = np.zeros(N)
    mg = np.zeros((N, m))

    p = np.empty((n, N + 1))
    q = np.zeros((n, N))
    R = np.zeros((n, N, m))
    moves = []
    for sweep in range(1, max_sweeps + 1):
        p[:, N] = p_term
        for i in range(N - 1, -1, -1):
            t = grid.times[i]
            xi = states.x[:, i]
            ybar = states.mean[i]
            rho_i = states.rho[:, i]
            X = state_features(xi, states.Y[:, i], ybar)
            _, cont = fit_ls(X, p[:, i + 1], ridge)
            _, qw = fit_ls(X, p[:, i + 1] * noise.dW1[:, i], ridge)
            q[:, i] = qw / dt
            jump_drv = np.zeros(n)
            for mk in range(noise.levy.n_marks):
                comp = noise.counts[:, i, mk] - rates[mk] * dt
                _, rj = fit_ls(X, p[:, i + 1] * comp, ridge)
                R[:, i, mk] = rj / (rates[mk] * dt)
                gx_m = model.gamma.dx(t, xi, ybar, u[:, i])[:, mk]
                jump_drv += gx_m * R[:, i, mk] * rates[mk]
            driver = (model.b.dx(t, xi, ybar, u[:, i]) * cont
                      + rho_i * mb[i]
                      + model.sigma.dx(t, xi, ybar, u[:, i]) * q[:, i]
                      + rho_i * ms[i]
                      + rho_i * (model.h.dx(t, xi) * pq.Q[:, i]
                                 + model.l.dx(t, xi, E0_f[i], u[:, i])
                                 + model.f.d(xi) * E0_ly[i])
                      + jump_drv
                      + rho_i * (mg[i] * rates).sum())
            p[:, i] = cont + driver * dt

        mb_new = np.zeros(N + 1)
        ms_new = np.zeros(N)
        mg_new = np.zeros((N, m))
        for i in range(N):
            t = grid.times[i]
            xi = states.x[:, i]
            ybar = states.mean[i]
            mb_new[i] = float((model.b.dy(t, xi, ybar, u[:, i]) * p[:, i]).mean())
            ms_new[i] = float((model.sigma.dy(t, xi, ybar, u[:, i]) * q[:, i]).mean())
            gy = model.gamma.dy(t, xi, ybar, u[:, i])
            for mk in range(m):
                mg_new[i, mk] = float((gy[:, mk] * R[:, i, mk]).mean())
        scale = max(np.abs(mb_new).max(), np.abs(ms_new).max(initial=0.0),
                    np.abs(mg_new).max(initial=0.0), 1e-12)
        move = max(np.abs(mb_new - mb).max(), np.abs(ms_new - ms).max(initial=0.0),
                   np.abs(mg_new - mg).max(initial=0.0)) / scale
        moves.append(move)
        mb, ms, mg = mb_new, ms_new, mg_new
        if move < tol:
            return BsdeSolution(P=pq.P, Q=pq.Q, G=pq.G, p=p, q=q, R=R,
                                sweeps=sweep, picard_moves=moves)
    raise ConvergenceError(
        f"mean-field driver terms did not settle in {max_sweeps} sweeps "
        f"(last relative move {moves[-1]:.3e})")


def hamiltonian(model: ModelSpec, sol: BsdeSolution, states: StateEnsemble,
                noise: NoiseEnsemble, i: int, v=None):
    """(H, H_v) per path at step i, evaluated at control v (default u(t_i))."""
    grid = noise.grid
    t = grid.times[i]
    xi = states.x[:, i]
    ybar = states.mean[i]
    rho_i = states.rho[:, i]
    if v is None:
        v = states.controls[:, i]
    v = np.broadcast_to(np.asarray(v, dtype=float), xi.shape)
    rates = noise.levy.rates if noise.levy.n_marks else np.zeros(noise.counts.shape[2])
    E0_f = float((rho_i * model.f.val(xi)).mean())
    jump = (sol.R[:, i, :] * model.gamma.val(t, xi, ybar, v) * rates).sum(axis=1)
    H = (model.b.val(t, xi, ybar, v) * sol.p[:, i]
         + model.sigma.val(t, xi, ybar, v) * sol.q[:, i]
         + jump
         + model.h.val(t, xi) * sol.Q[:, i]
         + model.l.val(t, xi, E0_f, v) * rho_i)
    jump_v = (sol.R[:, i, :] * model.gamma.dv(t, xi, ybar, v) * rates).sum(axis=1)
    Hv = (model.b.dv(t, xi, ybar, v) * sol.p[:, i]
          + model.sigma.dv(t, xi, ybar, v) * sol.q[:, i]
          + jump_v
          + model.l.dv(t, xi, E0_f, v) * rho_i)
    return H, Hv


def variational_inequality(model: ModelSpec, u_policy, v_policy,
                           states: StateEnsemble, sol: BsdeSolution,
                           noise: NoiseEnsemble,
                           cond_est: ConditionalEstimator | None = None):
    """Per-t regression estimates of E[H_v (v - u) | observations].

    Returns rows (t, mean, mean_se, rms, rms_se): mean is the plain average
    of the pathwise target with its standard error, rms/rms_se summarize the
    fitted conditional-expectation profile (for near-zero checks at an
    interior optimum).
    """
    cond_est = cond_est or ConditionalEstimator()
    grid = noise.grid
    rows = []
    for i in range(grid.N):
        y = states.Y[:, i]
        u_val = u_policy.value(i, y)
        v_val = v_policy.value(i, y)
        _, hv = hamiltonian(model, sol, states, noise, i)
        target = hv * (v_val - u_val)
        mean = float(target.mean())
        mean_se = float(target.std(ddof=1) / np.sqrt(target.size))
        rms, rms_se = cond_est.residual_stats(y, target)
        rows.append((grid.times[i], mean, mean_se, rms, rms_se))
    return np.array(rows)
