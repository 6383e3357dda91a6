"""Cost functional estimators and their control derivatives.

The cost can be evaluated two ways that must agree:

* under the original measure, simulating the observation with its drift and
  taking plain means; or
* under the reference measure, where the observation is a Brownian motion
  and every expectation is reweighted by the likelihood ratio rho.

The Gateaux derivative in a control direction is computed both by
finite differences with common random numbers and from the linearized
(state, likelihood) variation, which is the expression the adjoint systems
are summations of.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .forward import StateEnsemble, simulate_ensemble, simulate_variation
from .model import ControlPolicy, ModelSpec
from .paths import NoiseEnsemble

__all__ = ["CostEstimate", "estimate_cost", "pathwise_cost", "gateaux_of_cost"]


@dataclass(frozen=True)
class CostEstimate:
    value: float
    se: float
    n_paths: int
    measure: str


def _pad(controls):
    return np.concatenate([controls, controls[:, -1:]], axis=1)


def pathwise_cost(model: ModelSpec, states: StateEnsemble) -> np.ndarray:
    """Per-path cost contribution whose mean is J; (n,)."""
    grid = states.grid
    times = grid.times
    u = _pad(states.controls)
    if states.measure == "reference":
        rho = states.rho
        integ = np.empty_like(states.x)
        for i, t in enumerate(times):
            xi = states.x[:, i]
            E0_f = float((rho[:, i] * model.f.val(xi)).mean())
            integ[:, i] = rho[:, i] * model.l.val(t, xi, E0_f, u[:, i])
        rhoT = rho[:, -1]
        E0_g = float((rhoT * model.g.val(states.x[:, -1])).mean())
        term = rhoT * model.phi.val(states.x[:, -1], E0_g)
    elif states.measure == "original":
        integ = np.empty_like(states.x)
        for i, t in enumerate(times):
            xi = states.x[:, i]
            E0_f = float(model.f.val(xi).mean())
            integ[:, i] = model.l.val(t, xi, E0_f, u[:, i])
        E0_g = float(model.g.val(states.x[:, -1]).mean())
        term = model.phi.val(states.x[:, -1], E0_g)
    else:  # pragma: no cover - StateEnsemble validates
        raise UsageError(f"unknown measure {states.measure!r}")
    return np.trapezoid(integ, dx=grid.dt, axis=1) + term


def estimate_cost(model: ModelSpec, policy: ControlPolicy, noise: NoiseEnsemble,
                  measure: str = "reference",
                  states: StateEnsemble | None = None) -> CostEstimate:
    """Monte Carlo estimate of the cost J(policy) with standard error."""
    if states is None:
        states = simulate_ensemble(model, policy, noise, measure=measure)
    elif states.measure != measure:
        raise UsageError(f"states simulated under {states.measure!r}, "
                         f"requested {measure!r}")
    contrib = pathwise_cost(model, states)
    n = contrib.size
    return CostEstimate(value=float(contrib.mean()),
                        se=float(contrib.std(ddof=1) / np.sqrt(n)),
                        n_paths=n, measure=states.measure)


def _analytic_gateaux(model: ModelSpec, states: StateEnsemble,
                      var, direction_vals) -> tuple[float, float]:
    """Per-path linearized cost derivative from (x1, rho1); (value, se).

    Uses the frozen rho-weighted means for the mean-field cost arguments and
    their gradients, matching the linearization of the reweighted cost.
    """
    grid = states.grid
    times = grid.times
    u = _pad(states.controls)
    d = _pad(direction_vals)
    rho = states.rho
    x1, rho1 = var.x1, var.rho1
    integ = np.empty_like(states.x)
    E0_f = np.empty(len(times))
    for i, t in enumerate(times):
        xi = states.x[:, i]
        E0_f[i] = float((rho[:, i] * model.f.val(xi)).mean())
    for i, t in enumerate(times):
        xi = states.x[:, i]
        ly_bar = float((rho[:, i] * model.l.dy(t, xi, E0_f[i], u[:, i])).mean())
        mean_fx1 = float((rho[:, i] * model.f.d(xi) * x1[:, i]
                          + rho1[:, i] * model.f.val(xi)).mean())
        integ[:, i] = (rho[:, i] * (model.l.dx(t, xi, E0_f[i], u[:, i]) * x1[:, i]
                                    + model.l.dv(t, xi, E0_f[i], u[:, i]) * d[:, i])
                       + rho1[:, i] * model.l.val(t, xi, E0_f[i], u[:, i])
                       + mean_fx1 * ly_bar)
    xT = states.x[:, -1]
    rhoT = rho[:, -1]
    E0_g = float((rhoT * model.g.val(xT)).mean())
    phi_y_bar = float((rhoT * model.phi.dy(xT, E0_g)).mean())
    mean_gx1 = float((rhoT * model.g.d(xT) * x1[:, -1]
                      + rho1[:, -1] * model.g.val(xT)).mean())
    term = (rhoT * model.phi.dx(xT, E0_g) * x1[:, -1]
            + rho1[:, -1] * model.phi.val(xT, E0_g)
            + mean_gx1 * phi_y_bar)
    contrib = np.trapezoid(integ, dx=grid.dt, axis=1) + term
    n = contrib.size
    return float(contrib.mean()), float(contrib.std(ddof=1) / np.sqrt(n))


def gateaux_of_cost(model: ModelSpec, policy: ControlPolicy,
                    direction: ControlPolicy, noise: NoiseEnsemble,
                    eps_list=(0.1, 0.05, 0.025)):
    """Finite-difference and linearized estimates of J'(policy)[direction].

    Returns a dict with 'fd' rows (eps, value, se) computed with common
    random numbers, plus the 'analytic' (value, se) from the first-variation
    processes.
    """
    base = simulate_ensemble(model, policy, noise)
    base_contrib = pathwise_cost(model, base)
    rows = []
    for eps in eps_list:
        pert = policy.perturbed(direction, eps)
        st = simulate_ensemble(model, pert, noise)
        diff = (pathwise_cost(model, st) - base_contrib) / eps
        rows.append((eps, float(diff.mean()),
                     float(diff.std(ddof=1) / np.sqrt(diff.size))))
    var = simulate_variation(model, policy, direction, base, noise)
    dvals = np.empty_like(base.controls)
    for i in range(noise.grid.N):
        dvals[:, i] = direction.value(i, base.Y[:, i])
    ana, ana_se = _analytic_gateaux(model, base, var, dvals)
    return {"fd": np.array(rows), "analytic": (ana, ana_se)}
