"""Linear-quadratic solvers: fixed-point control updates and oracles.

Both characterizations of the optimal control are damped Picard iterations
of the same shape: simulate forward, compute the adjoint side, read the
control off the stationarity formula as a conditional expectation, damp,
repeat.  The backward-equation route handles the mean-field dynamics; the
stochastic-derivative route handles the no-mean-field variant.

The conditional expectations given the observation history are implemented
as ratios of regressions: E[rho-weighted numerator | Y] / E[rho | Y], the
computable (Kallianpur-Striebel) form of conditioning under the original
measure.

Independent baselines: a derivative-free policy search with common random
numbers, and, for the degenerate specification (no mean-field coupling in
the dynamics, uninformative observations, no jumps), a deterministic
Pontryagin oracle on the exact moment ODEs solved by fourth-order stepping
at 10x grid resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .adjoint_bsde import solve_bsde_p
from .adjoint_malliavin import malliavin_adjoint
from .cost import CostEstimate, estimate_cost
from .errors import UsageError
from .forward import simulate_ensemble
from .model import (ControlPolicy, LQSpec, ModelSpec, PlainLQSpec,
                    builtin_model)
from .paths import NoiseEnsemble
from .regression import ConditionalEstimator, fit_ls, y_features

__all__ = ["LqSolveReport", "DegenerateOracle", "lq_fixed_point",
           "lq_malliavin_control", "direct_search", "degenerate_lq_oracle",
           "linear_adjoint_ode", "control_gap"]


@dataclass
class LqSolveReport:
    sweeps: list = field(default_factory=list)
    final_policy: ControlPolicy | None = None
    J_final: CostEstimate | None = None
    J_initial: CostEstimate | None = None
    converged: bool = False
    diverged: bool = False
    trivial: bool = False
    oracle_gap: float | None = None


def _as_model(spec, noise, name):
    if isinstance(spec, ModelSpec):
        return spec
    return builtin_model(name, spec, levy=noise.levy)


def _control_multiplier_free(model: ModelSpec, noise: NoiseEnsemble) -> bool:
    """True when b, sigma and gamma carry no control dependence."""
    t = np.linspace(0.0, noise.grid.T, 5)
    x = np.linspace(-1.0, 1.0, 5)
    for ti, xi in zip(t, x):
        arg = (ti, np.array([xi]), 0.3, np.array([0.7]))
        if (np.any(model.b.dv(*arg)) or np.any(model.sigma.dv(*arg))
                or np.any(model.gamma.dv(*arg))):
            return False
    return True


def _policy_sup_change(old: ControlPolicy, new: ControlPolicy, Y) -> float:
    """sup over t of the rms policy difference on the observed Y ensemble."""
    worst = 0.0
    for i in range(old.grid.N):
        diff = new.value(i, Y[:, i]) - old.value(i, Y[:, i])
        worst = max(worst, float(np.sqrt(np.mean(diff ** 2))))
    return worst


def _m_policy(model: ModelSpec, grid) -> ControlPolicy:
    knots = np.zeros((grid.N, 3))
    for i, t in enumerate(grid.times[:-1]):
        knots[i, 0] = model.l.M(t)
    return ControlPolicy(knots=knots, grid=grid, u_min=model.u_min,
                        u_max=model.u_max)


def _picard_loop(model, noise, numerator_fn, max_sweeps, damping, tol,
                 init_policy, cond_est) -> LqSolveReport:
    """Shared fixed-point driver.

    numerator_fn(states, policy) returns the (n, N) adjoint-side integrand
    of the control formula; the loop turns it into the damped update
    u <- M - E[num | Y] / (O E[rho | Y]) projected on the policy basis.
    """
    grid = noise.grid
    cond_est = cond_est or ConditionalEstimator()
    report = LqSolveReport()
    if _control_multiplier_free(model, noise):
        policy = _m_policy(model, grid)
        report.final_policy = policy
        report.J_final = estimate_cost(model, policy, noise)
        report.trivial = True
        report.converged = True
        return report

    policy = init_policy or _m_policy(model, grid)
    report.J_initial = estimate_cost(model, policy, noise)
    prev = report.J_initial
    bad_streak = 0
    for sweep in range(1, max_sweeps + 1):
        st = simulate_ensemble(model, policy, noise)
        ce = estimate_cost(model, policy, noise, states=st)
        if ce.value > prev.value + 3.0 * np.hypot(ce.se, prev.se):
            bad_streak += 1
            if bad_streak >= 2:
                report.diverged = True
                report.sweeps.append(dict(sweep=sweep, J=ce.value, J_se=ce.se,
                                          sup_change=np.nan))
                break
        else:
            bad_streak = 0
        num = numerator_fn(st, policy)
        knots_new = np.empty((grid.N, 3))
        for i in range(grid.N):
            t = grid.times[i]
            y = st.Y[:, i]
            ratio = cond_est.conditional_ratio(y, num[:, i], st.rho[:, i])
            target = model.l.M(t) - ratio / model.l.O(t)
            knots_new[i], _ = fit_ls(y_features(y), target)
        knots = (1.0 - damping) * policy.knots + damping * knots_new
        new_policy = ControlPolicy(knots=knots, grid=grid,
                                   u_min=model.u_min, u_max=model.u_max)
        change = _policy_sup_change(policy, new_policy, st.Y)
        report.sweeps.append(dict(sweep=sweep, J=ce.value, J_se=ce.se,
                                  sup_change=change))
        policy = new_policy
        prev = ce
        if change < tol:
            report.converged = True
            break
    report.final_policy = policy
    report.J_final = estimate_cost(model, policy, noise)
    return report


def lq_fixed_point(spec, noise: NoiseEnsemble, max_sweeps: int = 12,
                   damping: float = 0.5, tol: float = 1e-3,
                   init_policy: ControlPolicy | None = None,
                   cond_est: ConditionalEstimator | None = None) -> LqSolveReport:
    """Fixed-point solve of the mean-field LQ control via the backward
    equations: u(t) = M(t) - E[b_v p + sigma_v q + sum gamma_v R rate | Y]
    / (O(t) E[rho(t) | Y])."""
    model = _as_model(spec, noise, "lq_meanfield")
    grid = noise.grid
    rates = noise.levy.rates if noise.levy.n_marks else np.zeros(noise.counts.shape[2])

    def numerator(st, policy):
        sol = solve_bsde_p(model, st, noise)
        num = np.empty((st.n_paths, grid.N))
        for i in range(grid.N):
            t = grid.times[i]
            xi = st.x[:, i]
            u = st.controls[:, i]
            num[:, i] = (model.b.dv(t, xi, st.mean[i], u) * sol.p[:, i]
                         + model.sigma.dv(t, xi, st.mean[i], u) * sol.q[:, i]
                         + (sol.R[:, i, :] * model.gamma.dv(t, xi, st.mean[i], u)
                            * rates).sum(axis=1))
        return num

    return _picard_loop(model, noise, numerator, max_sweeps, damping, tol,
                        init_policy, cond_est)


def lq_malliavin_control(spec, noise: NoiseEnsemble, max_sweeps: int = 8,
                    damping: float = 0.5, tol: float = 1e-3,
                    init_policy: ControlPolicy | None = None,
                    cond_est: ConditionalEstimator | None = None) -> LqSolveReport:
    """Fixed-point solve via the stochastic-derivative adjoint (q, k, r):
    u(t) = M(t) - E[B q + D k + sum G_z r rate | Y] / E[rho(t) | Y]."""
    model = _as_model(spec, noise, "lq_plain")
    if model.mean_field_in_state:
        raise UsageError("this route requires no mean field in the dynamics")
    grid = noise.grid
    rates = noise.levy.rates if noise.levy.n_marks else np.zeros(noise.counts.shape[2])
    probe = (0.5 * grid.T, np.array([0.3]), 0.1, np.array([0.2]))
    need_k = bool(np.any(model.sigma.dv(*probe)))
    need_r = bool(np.any(model.gamma.dv(*probe))) and noise.levy.n_marks > 0

    def numerator(st, policy):
        adj = malliavin_adjoint(model, policy, noise, with_kr=need_k or need_r)
        num = np.empty((st.n_paths, grid.N))
        for i in range(grid.N):
            t = grid.times[i]
            xi = st.x[:, i]
            u = st.controls[:, i]
            num[:, i] = model.b.dv(t, xi, st.mean[i], u) * adj.q[:, i]
            if need_k:
                num[:, i] += model.sigma.dv(t, xi, st.mean[i], u) * adj.k[:, i]
            if need_r:
                num[:, i] += (adj.r[:, i, :]
                              * model.gamma.dv(t, xi, st.mean[i], u)
                              * rates).sum(axis=1)
        return num

    return _picard_loop(model, noise, numerator, max_sweeps, damping, tol,
                        init_policy, cond_est)


# ---------------------------------------------------------------------------
# derivative-free baseline


def direct_search(model: ModelSpec, noise: NoiseEnsemble, n_blocks: int = 10,
                  features=(0,), budget: int = 400,
                  init_policy: ControlPolicy | None = None):
    """Nelder-Mead over blockwise-constant policy knots with common random
    numbers.  Returns (policy, CostEstimate, converged flag)."""
    grid = noise.grid
    N = grid.N
    n_blocks = min(n_blocks, N)
    block_of = (np.arange(N) * n_blocks) // N

    def expand(params):
        knots = np.zeros((N, 3))
        p = np.asarray(params, dtype=float).reshape(n_blocks, len(features))
        for j, feat in enumerate(features):
            knots[:, feat] = p[block_of, j]
        return ControlPolicy(knots=knots, grid=grid, u_min=model.u_min,
                             u_max=model.u_max)

    def objective(params):
        return estimate_cost(model, expand(params), noise).value

    if init_policy is not None:
        x0 = np.array([[init_policy.knots[block_of == b, feat].mean()
                        for feat in features] for b in range(n_blocks)]).ravel()
    else:
        x0 = np.zeros(n_blocks * len(features))
    res = minimize(objective, x0, method="Nelder-Mead",
                   options=dict(maxfev=budget, xatol=1e-4, fatol=1e-7))
    policy = expand(res.x)
    return policy, estimate_cost(model, policy, noise), bool(res.success)


# ---------------------------------------------------------------------------
# deterministic oracle for the degenerate specification


@dataclass
class DegenerateOracle:
    """Optimal deterministic control of the degenerate LQ problem.

    With uninformative observations the admissible controls are
    deterministic, and the problem closes on the moment pair
    (m, S) = (mean, variance):

        m' = A m + C v,      S' = (2A + D^2) S + (D m + F v)^2,
        J  = 0.5 int [L S + O (v - M)^2] dt + 0.5 N S(T).

    The Pontryagin system is solved by damped sweeps of fourth-order
    stepping on a refined grid.
    """

    times: np.ndarray
    v: np.ndarray
    m: np.ndarray
    S: np.ndarray
    J: float

    def v_of(self, t):
        return np.interp(t, self.times, self.v)


def _rk4(f, y0, times, backward=False):
    y = np.empty((len(times),) + np.shape(y0))
    if backward:
        y[-1] = y0
        idx = range(len(times) - 2, -1, -1)
        for i in idx:
            h = times[i] - times[i + 1]
            t = times[i + 1]
            yi = y[i + 1]
            k1 = f(t, yi)
            k2 = f(t + h / 2, yi + h / 2 * k1)
            k3 = f(t + h / 2, yi + h / 2 * k2)
            k4 = f(t + h, yi + h * k3)
            y[i] = yi + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    else:
        y[0] = y0
        for i in range(len(times) - 1):
            h = times[i + 1] - times[i]
            t = times[i]
            yi = y[i]
            k1 = f(t, yi)
            k2 = f(t + h / 2, yi + h / 2 * k1)
            k3 = f(t + h / 2, yi + h / 2 * k2)
            k4 = f(t + h, yi + h * k3)
            y[i + 1] = yi + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return y


def degenerate_lq_oracle(spec: LQSpec, T: float = 1.0, refine: int = 10,
                         base_steps: int = 50, max_iters: int = 400,
                         damping: float = 0.3, tol: float = 1e-10) -> DegenerateOracle:
    """Requires B = E = K = 0, no jumps, uninformative observation."""
    if spec.B or spec.E or any(spec.K) or any(spec.S) or any(spec.I) or spec.h1:
        raise UsageError("oracle needs B = E = 0, no jumps, h independent of x")
    A, C, D, F = spec.A, spec.C, spec.D, spec.F
    L, O, M, N = spec.L, spec.O, spec.M, spec.N_term
    times = np.linspace(0.0, T, base_steps * refine + 1)
    v = np.full_like(times, M)

    # costate of S is autonomous: mu' = -0.5 L - (2A + D^2) mu, mu(T) = 0.5 N
    mu = _rk4(lambda t, y: -0.5 * L - (2 * A + D * D) * y,
              0.5 * N, times, backward=True)

    for _ in range(max_iters):
        v_arr = v

        def fwd(t, y):
            vt = np.interp(t, times, v_arr)
            m_, S_ = y
            return np.array([A * m_ + C * vt,
                             (2 * A + D * D) * S_ + (D * m_ + F * vt) ** 2])

        mS = _rk4(fwd, np.array([spec.x0, 0.0]), times)
        m_path, S_path = mS[:, 0], mS[:, 1]

        def bwd(t, lam):
            vt = np.interp(t, times, v_arr)
            mt = np.interp(t, times, m_path)
            mut = np.interp(t, times, mu)
            return -(A * lam + 2 * mut * D * (D * mt + F * vt))

        lam = _rk4(bwd, 0.0, times, backward=True)
        v_new = (O * M - C * lam - 2 * mu * F * D * m_path) / (O + 2 * mu * F * F)
        move = float(np.max(np.abs(v_new - v)))
        v = (1 - damping) * v + damping * v_new
        if move < tol:
            break

    def fwd(t, y):
        vt = np.interp(t, times, v)
        m_, S_ = y
        return np.array([A * m_ + C * vt,
                         (2 * A + D * D) * S_ + (D * m_ + F * vt) ** 2])

    mS = _rk4(fwd, np.array([spec.x0, 0.0]), times)
    m_path, S_path = mS[:, 0], mS[:, 1]
    J = 0.5 * np.trapezoid(L * S_path + O * (v - M) ** 2, times) + 0.5 * N * S_path[-1]
    return DegenerateOracle(times=times, v=v, m=m_path, S=S_path, J=float(J))


def linear_adjoint_ode(A: float, L: float, N_term: float, T: float = 1.0,
                       refine_steps: int = 500):
    """Backward solve of P' = -2 A P - L, P(T) = N; returns (times, P)."""
    times = np.linspace(0.0, T, refine_steps + 1)
    P = _rk4(lambda t, y: -2 * A * y - L, float(N_term), times, backward=True)
    return times, P


def control_gap(policy: ControlPolicy, oracle: DegenerateOracle,
                states, noise: NoiseEnsemble) -> float:
    """rho-weighted L2(dt) distance between a policy and the oracle control."""
    grid = noise.grid
    total = 0.0
    for i in range(grid.N):
        t = grid.times[i]
        diff = policy.value(i, states.Y[:, i]) - oracle.v_of(t)
        total += float((states.rho[:, i] * diff ** 2).mean()) * grid.dt
    return float(np.sqrt(total))
