"""Closed-form adjoint engine built from pathwise stochastic derivatives.

For models without mean field in the state dynamics, the adjoint triple
(q, k, r) has an explicit representation:

    q(t) = Sigma(t) + int_t^T Hx(s) G(t,s) ds,
    k(t) = D_t^{W1} q(t),      r(t, z) = D_{t,z} q(t),

where Sigma aggregates the reweighted cost gradients, G is the exponential
fundamental solution of the homogeneous first-variation equation, and Hx
combines Sigma, the derivative fields of Sigma and of the cost aggregate Pi,
and the observation coupling.  All stochastic derivatives are taken with the
operators of the malliavin module applied to the assembled functionals, so
the Poisson part is exact and one code path serves every term.

Mean-field expectations (taken under the original measure) are realized as
rho-weighted ensemble means and frozen as constants of the engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegeneracyError, UsageError
from .forward import StateEnsemble, simulate_ensemble
from .malliavin import default_eps
from .model import ControlPolicy, ModelSpec
from .paths import NoiseEnsemble
from .regression import ConditionalEstimator

__all__ = [
    "MalliavinAdjoint",
    "MalliavinAdjointEnsemble",
    "fundamental_solution",
    "flow_exponent",
    "malliavin_adjoint",
    "hv_stationarity",
]


@dataclass
class MalliavinAdjoint:
    """Per-path view of the adjoint quantities; G(i, j) = exp(e_j - e_i)."""

    Sigma: np.ndarray
    Pi: np.ndarray
    Lambda: np.ndarray
    Hx: np.ndarray
    q: np.ndarray
    k: np.ndarray | None
    r: np.ndarray | None
    expo: np.ndarray

    def G(self, t_index: int, s_index: int) -> float:
        if s_index < t_index:
            raise UsageError("G(t,s) requires s >= t")
        return float(np.exp(self.expo[s_index] - self.expo[t_index]))


@dataclass
class MalliavinAdjointEnsemble:
    Sigma: np.ndarray   # (n, N+1)
    Pi: np.ndarray      # (n, N+1)
    Lambda: np.ndarray  # (n, N+1)
    Hx: np.ndarray      # (n, N+1)
    q: np.ndarray       # (n, N+1)
    k: np.ndarray | None       # (n, N)
    r: np.ndarray | None       # (n, N, m)
    expo: np.ndarray    # (n, N+1)

    def paths(self):
        n = self.q.shape[0]
        return [MalliavinAdjoint(self.Sigma[i], self.Pi[i], self.Lambda[i],
                            self.Hx[i], self.q[i],
                            None if self.k is None else self.k[i],
                            None if self.r is None else self.r[i],
                            self.expo[i]) for i in range(n)]


def _pad_controls(controls):
    return np.concatenate([controls, controls[:, -1:]], axis=1)


def flow_exponent(model: ModelSpec, states: StateEnsemble, noise: NoiseEnsemble) -> np.ndarray:
    """Cumulative exponent e with G(t,s) = exp(e_s - e_t), shape (n, N+1)."""
    grid = noise.grid
    n, N = noise.n_paths, grid.N
    dt = grid.dt
    rates = noise.levy.rates if noise.levy.n_marks else np.zeros(noise.counts.shape[2])
    e = np.zeros((n, N + 1))
    for i in range(N):
        t = i * dt
        xi = states.x[:, i]
        v = states.controls[:, i]
        bx = model.b.dx(t, xi, states.mean[i], v)
        sx = model.sigma.dx(t, xi, states.mean[i], v)
        gx = model.gamma.dx(t, xi, states.mean[i], v)
        if np.any(1.0 + gx <= 0.0):
            raise DegeneracyError(f"1 + gamma_x <= 0 at step {i}: flow formula invalid")
        lg = np.log1p(gx)
        # compensated jump-noise integral of ln(1+gamma_x) plus the
        # (ln(1+gamma_x) - gamma_x) intensity term collapse to counts.lg
        # minus the gamma_x compensator
        e[:, i + 1] = (e[:, i] + (bx - 0.5 * sx * sx) * dt + sx * noise.dW1[:, i]
                       + (noise.counts[:, i, :] * lg).sum(axis=1)
                       - (gx * rates).sum(axis=1) * dt)
    return e


def fundamental_solution(model: ModelSpec, states, noise, t_index: int,
                         s_index: int) -> np.ndarray:
    """G(t_i, t_j) per path via the exponential formula; j >= i."""
    if s_index < t_index:
        raise UsageError("fundamental_solution requires s_index >= t_index")
    if not isinstance(noise, NoiseEnsemble):
        noise = NoiseEnsemble.from_bundles([noise] if not isinstance(noise, list) else noise)
    if not isinstance(states, StateEnsemble):
        raise UsageError("states must be a StateEnsemble")
    e = flow_exponent(model, states, noise)
    return np.exp(e[:, s_index] - e[:, t_index])


def _right_trapz(values, dt):
    """R[i] = trapz of values over [t_i, T]; values shape (n, N+1)."""
    n, Np1 = values.shape
    cells = 0.5 * (values[:, :-1] + values[:, 1:]) * dt
    out = np.zeros((n, Np1))
    out[:, :-1] = np.cumsum(cells[:, ::-1], axis=1)[:, ::-1]
    return out


class _MalliavinEngine:
    """Holds frozen mean-field constants and performs the resimulations."""

    def __init__(self, model: ModelSpec, policy: ControlPolicy, noise: NoiseEnsemble,
                 eps: float | None = None):
        if model.mean_field_in_state:
            raise UsageError("the closed-form adjoint requires no mean field "
                             "in the state dynamics")
        self.model = model
        self.policy = policy
        self.noise = noise
        self.grid = noise.grid
        self.dt = noise.grid.dt
        m = noise.counts.shape[2]
        self.rates = noise.levy.rates if noise.levy.n_marks else np.zeros(m)
        self.eps = default_eps(noise.grid) if eps is None else eps

        base = simulate_ensemble(model, policy, noise)
        self.base = base
        u = _pad_controls(base.controls)
        times = noise.grid.times
        # frozen mean-field constants, rho-weighted to land under the
        # original measure
        rhoT = base.rho[:, -1]
        xT = base.x[:, -1]
        self.E0_g = float((rhoT * model.g.val(xT)).mean())
        self.E0_phi_y = float((rhoT * model.phi.dy(xT, self.E0_g)).mean())
        self.E0_f = np.array([
            float((base.rho[:, i] * model.f.val(base.x[:, i])).mean())
            for i in range(len(times))])
        self.E0_ly = np.array([
            float((base.rho[:, i]
                   * model.l.dy(times[i], base.x[:, i], self.E0_f[i], u[:, i])).mean())
            for i in range(len(times))])

    # -- resimulation on (possibly perturbed) noise arrays ------------------

    def sim(self, dW1, dY, counts) -> StateEnsemble:
        pert = NoiseEnsemble(dW1=dW1, dY=dY, counts=counts,
                             grid=self.noise.grid, levy=self.noise.levy)
        return simulate_ensemble(self.model, self.policy, pert)

    # -- functional evaluations ---------------------------------------------

    def sigma_pi_all(self, st: StateEnsemble):
        """Sigma(s), Pi(s) at every grid index, shape (n, N+1)."""
        model = self.model
        times = self.grid.times
        u = _pad_controls(st.controls)
        rhoT = st.rho[:, -1]
        xT = st.x[:, -1]
        term_sigma = rhoT * (model.phi.dx(xT, self.E0_g)
                             + model.g.d(xT) * self.E0_phi_y)
        term_pi = rhoT * (model.phi.val(xT, self.E0_g)
                          + model.g.val(xT) * self.E0_phi_y)
        c = np.empty_like(st.x)
        d = np.empty_like(st.x)
        for i, t in enumerate(times):
            xi = st.x[:, i]
            c[:, i] = st.rho[:, i] * (model.l.dx(t, xi, self.E0_f[i], u[:, i])
                                      + model.f.d(xi) * self.E0_ly[i])
            d[:, i] = st.rho[:, i] * (model.l.val(t, xi, self.E0_f[i], u[:, i])
                                      + model.f.val(xi) * self.E0_ly[i])
        Sigma = term_sigma[:, None] + _right_trapz(c, self.dt)
        Pi = term_pi[:, None] + _right_trapz(d, self.dt)
        return Sigma, Pi

    def sigma_at(self, st: StateEnsemble, s: int):
        return self.sigma_pi_all(st)[0][:, s]

    def _sigma_single(self, st: StateEnsemble, s: int):
        """Sigma(t_s) only; avoids the full (n, N+1) assembly."""
        model = self.model
        times = self.grid.times
        u = _pad_controls(st.controls)
        rhoT = st.rho[:, -1]
        xT = st.x[:, -1]
        out = rhoT * (model.phi.dx(xT, self.E0_g) + model.g.d(xT) * self.E0_phi_y)
        c_prev = None
        for i in range(s, len(times)):
            xi = st.x[:, i]
            ci = st.rho[:, i] * (model.l.dx(times[i], xi, self.E0_f[i], u[:, i])
                                 + model.f.d(xi) * self.E0_ly[i])
            if c_prev is not None:
                out = out + 0.5 * (c_prev + ci) * self.dt
            c_prev = ci
        return out

    def _pi_single(self, st: StateEnsemble, s: int):
        model = self.model
        times = self.grid.times
        u = _pad_controls(st.controls)
        rhoT = st.rho[:, -1]
        xT = st.x[:, -1]
        out = rhoT * (model.phi.val(xT, self.E0_g) + model.g.val(xT) * self.E0_phi_y)
        d_prev = None
        for i in range(s, len(times)):
            xi = st.x[:, i]
            di = st.rho[:, i] * (model.l.val(times[i], xi, self.E0_f[i], u[:, i])
                                 + model.f.val(xi) * self.E0_ly[i])
            if d_prev is not None:
                out = out + 0.5 * (d_prev + di) * self.dt
            d_prev = di
        return out

    # -- Hx assembly ---------------------------------------------------------

    def hx_at(self, dW1, dY, counts, st: StateEnsemble, s: int,
              Sigma=None, Pi=None):
        """H_x at grid index s on the given noise (n,) values.

        The stochastic derivatives at s are taken in the cell containing s
        (the last cell for s = N).
        """
        model = self.model
        eps = self.eps
        cell = min(s, self.grid.N - 1)
        t = self.grid.times[s]
        xi = st.x[:, s]
        u = _pad_controls(st.controls)[:, s]
        ybar = st.mean[s]

        sig_s = Sigma[:, s] if Sigma is not None else self._sigma_single(st, s)
        pi_s = Pi[:, s] if Pi is not None else None
        lam_s = model.h.val(t, xi) * (pi_s if pi_s is not None else self._pi_single(st, s))

        # D_s^{W1} Sigma(s): central difference of a W1 cell shift
        w = dW1.copy()
        w[:, cell] += eps
        up = self._sigma_single(self.sim(w, dY, counts), s)
        w[:, cell] -= 2 * eps
        dn = self._sigma_single(self.sim(w, dY, counts), s)
        d_w1_sigma = (up - dn) / (2 * eps)

        hx_coef = model.h.dx(t, xi)
        if np.any(hx_coef != 0.0):
            yy = dY.copy()
            yy[:, cell] += eps
            up = self._pi_single(self.sim(dW1, yy, counts), s)
            yy[:, cell] -= 2 * eps
            dn = self._pi_single(self.sim(dW1, yy, counts), s)
            d_y_pi = (up - dn) / (2 * eps)
        else:
            d_y_pi = 0.0

        gx = model.gamma.dx(t, xi, ybar, u)
        jump_term = np.zeros(xi.shape)
        if self.rates.size and np.any(gx != 0.0):
            cc = counts.copy()
            base_sig = sig_s
            for mk in range(len(self.rates)):
                cc[:, cell, mk] += 1.0
                d_n_sigma = self._sigma_single(self.sim(dW1, dY, cc), s) - base_sig
                cc[:, cell, mk] -= 1.0
                jump_term = jump_term + gx[:, mk] * d_n_sigma * self.rates[mk]

        bx = model.b.dx(t, xi, ybar, u)
        sx = model.sigma.dx(t, xi, ybar, u)
        return (sig_s * bx + sx * d_w1_sigma
                + hx_coef * (d_y_pi - lam_s) + jump_term)

    # -- q assembly -----------------------------------------------------------

    def q_profile(self, dW1, dY, counts, t_min: int = 0, single_t: int | None = None):
        """q at grid indices >= t_min (or just at single_t) for given noise.

        Returns (q, st, extras) where q has shape (n, N+1) with entries below
        t_min unset when single_t is None, or shape (n,) otherwise.
        """
        st = self.sim(dW1, dY, counts)
        Sigma, Pi = self.sigma_pi_all(st)
        e = flow_exponent(self.model, st, NoiseEnsemble(
            dW1=dW1, dY=dY, counts=counts, grid=self.grid, levy=self.noise.levy))
        N = self.grid.N
        lo = t_min if single_t is None else single_t
        hx = np.zeros_like(Sigma)
        for s in range(lo, N + 1):
            hx[:, s] = self.hx_at(dW1, dY, counts, st, s, Sigma=Sigma, Pi=Pi)
        # q(t) = Sigma(t) + exp(-e_t) * trapz_{s>=t} hx(s) exp(e_s) ds
        weighted = hx * np.exp(e)
        integ = _right_trapz(weighted, self.dt)
        q = Sigma + np.exp(-e) * integ
        if single_t is not None:
            return q[:, single_t], st, (Sigma, Pi, hx, e)
        return q, st, (Sigma, Pi, hx, e)


def malliavin_adjoint(model: ModelSpec, policy: ControlPolicy, noise: NoiseEnsemble,
                 cond_est: ConditionalEstimator | None = None,
                 eps: float | None = None, with_kr: bool = True) -> MalliavinAdjointEnsemble:
    """Assemble (Sigma, Pi, Lambda, Hx, q) and, optionally, (k, r) pathwise.

    k and r require nested derivative passes and dominate the runtime; pass
    with_kr=False when only q is needed.
    """
    eng = _MalliavinEngine(model, policy, noise, eps=eps)
    dW1, dY, counts = noise.dW1, noise.dY, noise.counts
    q, st, (Sigma, Pi, hx, e) = eng.q_profile(dW1, dY, counts)
    Lambda = np.empty_like(Pi)
    for s, t in enumerate(noise.grid.times):
        Lambda[:, s] = model.h.val(t, st.x[:, s]) * Pi[:, s]

    k = r = None
    if with_kr:
        N = noise.grid.N
        n = noise.n_paths
        m = counts.shape[2]
        k = np.empty((n, N))
        r = np.zeros((n, N, m))
        epsk = eng.eps
        for t_idx in range(N):
            w = dW1.copy()
            w[:, t_idx] += epsk
            qu, _, _ = eng.q_profile(w, dY, counts, single_t=t_idx)
            w[:, t_idx] -= 2 * epsk
            qd, _, _ = eng.q_profile(w, dY, counts, single_t=t_idx)
            k[:, t_idx] = (qu - qd) / (2 * epsk)
            if noise.levy.n_marks:
                cc = counts.copy()
                for mk in range(m):
                    cc[:, t_idx, mk] += 1.0
                    qj, _, _ = eng.q_profile(dW1, dY, cc, single_t=t_idx)
                    cc[:, t_idx, mk] -= 1.0
                    r[:, t_idx, mk] = qj - q[:, t_idx]
    return MalliavinAdjointEnsemble(Sigma=Sigma, Pi=Pi, Lambda=Lambda, Hx=hx, q=q,
                               k=k, r=r, expo=e)


def hv_stationarity(model: ModelSpec, policy: ControlPolicy, adj: MalliavinAdjointEnsemble,
                    states: StateEnsemble, noise: NoiseEnsemble,
                    cond_est: ConditionalEstimator | None = None):
    """Per-t conditional-mean estimates of the control gradient H_v.

    Returns rows (t, rms of fitted conditional mean, its SE); the maximum
    principle predicts the fitted values vanish at the optimal control.
    """
    cond_est = cond_est or ConditionalEstimator()
    grid = noise.grid
    rates = noise.levy.rates if noise.levy.n_marks else np.zeros(noise.counts.shape[2])
    rows = []
    for i in range(grid.N):
        t = grid.times[i]
        xi = states.x[:, i]
        u = states.controls[:, i]
        ybar = states.mean[i]
        E0_f = float((states.rho[:, i] * model.f.val(xi)).mean())
        hv = (model.b.dv(t, xi, ybar, u) * adj.q[:, i]
              + model.l.dv(t, xi, E0_f, u) * states.rho[:, i])
        if adj.k is not None:
            hv = hv + model.sigma.dv(t, xi, ybar, u) * adj.k[:, i]
        if adj.r is not None and rates.size:
            gv = model.gamma.dv(t, xi, ybar, u)
            hv = hv + (adj.r[:, i, :] * gv * rates).sum(axis=1)
        rms, se = cond_est.residual_stats(states.Y[:, i], hv)
        rows.append((t, rms, se))
    return np.array(rows)
