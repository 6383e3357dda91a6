"""Euler simulation of the state, the reweighting density, and first variations.

The state is stepped explicitly with left-point (predictable) jump integrands
and per-cell compensation, so compensated jump integrals stay mean-zero in the
scheme.  The density rho is propagated in log space from its closed-form
exponent, which guarantees positivity.  Mean-field arguments are replaced by
the synchronous cross-particle mean of the ensemble.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SimulationError, UsageError
from .model import ControlPolicy, ModelSpec
from .paths import NoiseEnsemble, TimeGrid

__all__ = [
    "StatePath",
    "VariationPath",
    "StateEnsemble",
    "VariationEnsemble",
    "simulate_ensemble",
    "simulate_state",
    "estimate_rho_mean",
    "simulate_variation",
    "gateaux_residual",
]


@dataclass
class StatePath:
    """One trajectory: state, density, mean estimate, applied controls."""

    x: np.ndarray
    rho: np.ndarray
    mean_estimate: np.ndarray
    controls: np.ndarray


@dataclass
class VariationPath:
    x1: np.ndarray
    rho1: np.ndarray


@dataclass
class StateEnsemble:
    """Vectorized ensemble of state trajectories.

    x, rho, Y: (n, N+1); controls: (n, N); mean: (N+1,) cross-particle mean
    of x (the particle estimate of the mean-field argument).
    measure is "reference" (Y is Brownian, rho accumulated) or "original"
    (Y carries the h drift, rho identically 1).
    """

    x: np.ndarray
    rho: np.ndarray
    Y: np.ndarray
    controls: np.ndarray
    mean: np.ndarray
    measure: str
    grid: TimeGrid | None = None

    @property
    def n_paths(self):
        return self.x.shape[0]

    def paths(self):
        return [StatePath(x=self.x[k], rho=self.rho[k], mean_estimate=self.mean,
                          controls=self.controls[k]) for k in range(self.n_paths)]


@dataclass
class VariationEnsemble:
    x1: np.ndarray
    rho1: np.ndarray
    mean1: np.ndarray


def simulate_ensemble(model: ModelSpec, policy: ControlPolicy, noise: NoiseEnsemble,
                      measure: str = "reference") -> StateEnsemble:
    """Euler step of the state and density over the whole ensemble."""
    if measure not in ("reference", "original"):
        raise UsageError(f"unknown measure {measure!r}")
    grid = noise.grid
    n, N = noise.n_paths, grid.N
    dt = grid.dt
    rates = noise.levy.rates if noise.levy.n_marks else np.zeros(noise.counts.shape[2])

    x = np.empty((n, N + 1))
    logrho = np.zeros((n, N + 1))
    Y = np.zeros((n, N + 1))
    controls = np.empty((n, N))
    mean = np.empty(N + 1)
    x[:, 0] = model.x0

    for i in range(N):
        t = i * dt
        xi = x[:, i]
        mean[i] = xi.mean()
        v = policy.value(i, Y[:, i])
        controls[:, i] = v
        b = model.b.val(t, xi, mean[i], v)
        sig = model.sigma.val(t, xi, mean[i], v)
        gam = model.gamma.val(t, xi, mean[i], v)
        jump = (noise.counts[:, i, :] * gam).sum(axis=1) - dt * (rates * gam).sum(axis=1)
        x[:, i + 1] = xi + b * dt + sig * noise.dW1[:, i] + jump
        h = model.h.val(t, xi)
        if measure == "reference":
            Y[:, i + 1] = Y[:, i] + noise.dY[:, i]
            logrho[:, i + 1] = logrho[:, i] + h * noise.dY[:, i] - 0.5 * h * h * dt
        else:
            Y[:, i + 1] = Y[:, i] + h * dt + noise.dY[:, i]
        if not np.all(np.isfinite(x[:, i + 1])):
            bad = int(np.flatnonzero(~np.isfinite(x[:, i + 1]))[0])
            raise SimulationError(f"state blew up on path {bad} at step {i + 1}")
    mean[N] = x[:, N].mean()

    rho = np.exp(logrho) if measure == "reference" else np.ones((n, N + 1))
    return StateEnsemble(x=x, rho=rho, Y=Y, controls=controls, mean=mean,
                         measure=measure, grid=noise.grid)


def simulate_state(model: ModelSpec, policy: ControlPolicy, paths,
                   measure: str = "reference"):
    """Spec-level entry point: list of PathBundle -> list of StatePath."""
    noise = paths if isinstance(paths, NoiseEnsemble) else NoiseEnsemble.from_bundles(paths)
    return simulate_ensemble(model, policy, noise, measure=measure).paths()


def estimate_rho_mean(states, t_index: int):
    """Sample mean and standard error of rho(t_i) over the ensemble."""
    if isinstance(states, StateEnsemble):
        vals = states.rho[:, t_index]
    else:
        vals = np.array([s.rho[t_index] for s in states])
    if vals.shape[0] < 2:
        raise UsageError("need at least 2 paths for a standard error")
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.shape[0]))


def _direction_values(direction, i, Y_col):
    if isinstance(direction, ControlPolicy):
        return direction.value(i, Y_col)
    return np.broadcast_to(np.asarray(direction, dtype=float)[..., i], Y_col.shape)


def simulate_variation(model: ModelSpec, base_policy: ControlPolicy, direction,
                       states: StateEnsemble, noise: NoiseEnsemble) -> VariationEnsemble:
    """Euler step of the linear variation SDE along the frozen base trajectory.

    direction is a ControlPolicy (or (n, N) array) giving the perturbation of
    the control; for the mean-field necessary condition it is v - u.
    """
    if states.x.shape[0] != noise.n_paths or states.x.shape[1] != noise.grid.N + 1:
        raise UsageError("states/noise shape mismatch")
    grid = noise.grid
    n, N = noise.n_paths, grid.N
    dt = grid.dt
    rates = noise.levy.rates if noise.levy.n_marks else np.zeros(noise.counts.shape[2])

    x1 = np.zeros((n, N + 1))
    rho1 = np.zeros((n, N + 1))
    mean1 = np.zeros(N + 1)
    mf = model.mean_field_in_state

    for i in range(N):
        t = i * dt
        xi = states.x[:, i]
        ybar = states.mean[i]
        v = states.controls[:, i]
        d = _direction_values(direction, i, states.Y[:, i])
        m1 = x1[:, i].mean()
        mean1[i] = m1
        bx = model.b.dx(t, xi, ybar, v)
        sx = model.sigma.dx(t, xi, ybar, v)
        gx = model.gamma.dx(t, xi, ybar, v)
        bv = model.b.dv(t, xi, ybar, v)
        sv = model.sigma.dv(t, xi, ybar, v)
        gv = model.gamma.dv(t, xi, ybar, v)
        drift = bx * x1[:, i] + bv * d
        diff = sx * x1[:, i] + sv * d
        jump_lin = gx * x1[:, i, None] + gv * d[:, None]
        if mf:
            by = model.b.dy(t, xi, ybar, v)
            sy = model.sigma.dy(t, xi, ybar, v)
            gy = model.gamma.dy(t, xi, ybar, v)
            drift = drift + by * m1
            diff = diff + sy * m1
            jump_lin = jump_lin + gy * m1
        dN_comp = noise.counts[:, i, :] - rates * dt
        x1[:, i + 1] = (x1[:, i] + drift * dt + diff * noise.dW1[:, i]
                        + (jump_lin * dN_comp).sum(axis=1))
        h = model.h.val(t, xi)
        hx = model.h.dx(t, xi)
        rho1[:, i + 1] = rho1[:, i] + (rho1[:, i] * h
                                       + states.rho[:, i] * hx * x1[:, i]) * noise.dY[:, i]
    mean1[N] = x1[:, N].mean()
    return VariationEnsemble(x1=x1, rho1=rho1, mean1=mean1)


def gateaux_residual(model: ModelSpec, base_policy: ControlPolicy,
                     direction: ControlPolicy, eps_list, noise: NoiseEnsemble):
    """Finite-difference vs first-variation residuals under common random numbers.

    Returns a list of rows (eps, sup_t mean[( (x_eps-x)/eps - x1 )^2],
    sup_t mean[( (rho_eps-rho)/eps - rho1 )^2]).
    """
    base = simulate_ensemble(model, base_policy, noise)
    var = simulate_variation(model, base_policy, direction, base, noise)
    rows = []
    for eps in eps_list:
        pert = simulate_ensemble(model, base_policy.perturbed(direction, eps), noise)
        rx = ((pert.x - base.x) / eps - var.x1)
        rr = ((pert.rho - base.rho) / eps - var.rho1)
        rows.append((float(eps),
                     float(np.max((rx ** 2).mean(axis=0))),
                     float(np.max((rr ** 2).mean(axis=0)))))
    return rows
