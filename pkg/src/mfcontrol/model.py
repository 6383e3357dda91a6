"""Coefficient bundles, control policies, and the built-in model catalog.

Every coefficient exposes analytic partial derivatives so downstream
simulators and adjoint engines never finite-difference the model itself.
Coefficients are deterministic functions of (t, x, y, v) where y stands for
the mean-field argument (the ensemble mean of the state, or of f(state) in
the running cost).  Jump coefficients additionally broadcast over marks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError
from .paths import EMPTY_LEVY, LevyMeasure, TimeGrid

__all__ = [
    "AffineCoefficient",
    "TanhCoefficient",
    "AffineJump",
    "TanhJump",
    "AffineObservation",
    "TanhObservation",
    "QuadraticRunningCost",
    "QuadraticTerminalCost",
    "Identity",
    "Tanh",
    "ModelSpec",
    "ControlPolicy",
    "LQSpec",
    "PlainLQSpec",
    "builtin_model",
    "eval_policy",
    "audit_partials",
]


def _as_fn(c):
    """Promote a constant to a function of t."""
    if callable(c):
        return c
    value = float(c)
    return lambda t: value


def _as_mark_fn(c, n_marks):
    """Promote per-mark constants to a function of t returning an (m,) array."""
    if callable(c):
        return lambda t: np.asarray(c(t), dtype=float)
    arr = np.broadcast_to(np.asarray(c, dtype=float), (n_marks,)).copy()
    return lambda t: arr


class AffineCoefficient:
    """c0(t) + cx(t)*x + cy(t)*y + cv(t)*v with exact partials."""

    def __init__(self, c0=0.0, cx=0.0, cy=0.0, cv=0.0):
        self.c0, self.cx, self.cy, self.cv = map(_as_fn, (c0, cx, cy, cv))

    def val(self, t, x, y, v):
        return self.c0(t) + self.cx(t) * x + self.cy(t) * y + self.cv(t) * v

    def dx(self, t, x, y, v):
        return np.broadcast_to(self.cx(t), np.shape(x)).astype(float)

    def dy(self, t, x, y, v):
        return np.broadcast_to(self.cy(t), np.shape(x)).astype(float)

    def dv(self, t, x, y, v):
        return np.broadcast_to(self.cv(t), np.shape(x)).astype(float)


class TanhCoefficient:
    """c0 + a*tanh(s*x) + cy*y + cv*v; bounded with bounded partials."""

    def __init__(self, c0=0.0, a=0.0, s=1.0, cy=0.0, cv=0.0):
        self.c0, self.a, self.cy, self.cv = map(_as_fn, (c0, a, cy, cv))
        self.s = float(s)

    def val(self, t, x, y, v):
        return self.c0(t) + self.a(t) * np.tanh(self.s * x) + self.cy(t) * y + self.cv(t) * v

    def dx(self, t, x, y, v):
        return self.a(t) * self.s / np.cosh(self.s * x) ** 2

    def dy(self, t, x, y, v):
        return np.broadcast_to(self.cy(t), np.shape(x)).astype(float)

    def dv(self, t, x, y, v):
        return np.broadcast_to(self.cv(t), np.shape(x)).astype(float)


class AffineJump:
    """Per-mark affine jump coefficient: cx_m(t)*x + cy_m(t)*y + cv_m(t)*v.

    val/partials return arrays of shape x.shape + (n_marks,).
    """

    def __init__(self, n_marks, cx=0.0, cy=0.0, cv=0.0):
        self.n_marks = n_marks
        self.cx = _as_mark_fn(cx, n_marks)
        self.cy = _as_mark_fn(cy, n_marks)
        self.cv = _as_mark_fn(cv, n_marks)

    def _expand(self, arr, shape):
        return np.broadcast_to(arr, shape + (self.n_marks,)).astype(float)

    def val(self, t, x, y, v):
        x = np.asarray(x, dtype=float)
        y = np.broadcast_to(np.asarray(y, dtype=float), x.shape)
        v = np.broadcast_to(np.asarray(v, dtype=float), x.shape)
        return (self.cx(t) * x[..., None] + self.cy(t) * y[..., None]
                + self.cv(t) * v[..., None])

    def dx(self, t, x, y, v):
        return self._expand(self.cx(t), np.shape(x))

    def dy(self, t, x, y, v):
        return self._expand(self.cy(t), np.shape(x))

    def dv(self, t, x, y, v):
        return self._expand(self.cv(t), np.shape(x))


class TanhJump:
    """Per-mark bounded jump coefficient: a_m*tanh(x) + cv_m*v."""

    def __init__(self, n_marks, a=0.0, cv=0.0):
        self.n_marks = n_marks
        self.a = _as_mark_fn(a, n_marks)
        self.cv = _as_mark_fn(cv, n_marks)

    def val(self, t, x, y, v):
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float)
        return self.a(t) * np.tanh(x)[..., None] + self.cv(t) * v[..., None]

    def dx(self, t, x, y, v):
        x = np.asarray(x, dtype=float)
        return self.a(t) * (1.0 / np.cosh(x) ** 2)[..., None]

    def dy(self, t, x, y, v):
        return np.zeros(np.shape(x) + (self.n_marks,))

    def dv(self, t, x, y, v):
        return np.broadcast_to(self.cv(t), np.shape(x) + (self.n_marks,)).astype(float)


class AffineObservation:
    """h(t, x) = h0(t) + h1(t)*x."""

    def __init__(self, h0=0.0, h1=0.0):
        self.h0, self.h1 = _as_fn(h0), _as_fn(h1)

    def val(self, t, x):
        return self.h0(t) + self.h1(t) * x

    def dx(self, t, x):
        return np.broadcast_to(self.h1(t), np.shape(x)).astype(float)


class TanhObservation:
    """h(t, x) = a*tanh(s*x); bounded with bounded derivative."""

    def __init__(self, a=0.5, s=1.0):
        self.a, self.s = float(a), float(s)

    def val(self, t, x):
        return self.a * np.tanh(self.s * x)

    def dx(self, t, x):
        return self.a * self.s / np.cosh(self.s * x) ** 2


ZERO_OBSERVATION = AffineObservation(0.0, 0.0)


class QuadraticRunningCost:
    """l(t, x, y, v) = 0.5*L(t)*(x - y)^2 + 0.5*O(t)*(v - M(t))^2."""

    def __init__(self, L=0.0, O=1.0, M=0.0):
        self.L, self.O, self.M = map(_as_fn, (L, O, M))

    def val(self, t, x, y, v):
        return 0.5 * self.L(t) * (x - y) ** 2 + 0.5 * self.O(t) * (v - self.M(t)) ** 2

    def dx(self, t, x, y, v):
        return self.L(t) * (x - y)

    def dy(self, t, x, y, v):
        return -self.L(t) * (x - y)

    def dv(self, t, x, y, v):
        return self.O(t) * (v - self.M(t)) * np.ones(np.shape(x))


class QuadraticTerminalCost:
    """phi(x, y) = 0.5*N*(x - y)^2."""

    def __init__(self, N=0.0):
        self.N = float(N)

    def val(self, x, y):
        return 0.5 * self.N * (x - y) ** 2

    def dx(self, x, y):
        return self.N * (x - y)

    def dy(self, x, y):
        return -self.N * (x - y)


class Identity:
    def val(self, x):
        return np.asarray(x, dtype=float)

    def d(self, x):
        return np.ones(np.shape(x))


class Tanh:
    def val(self, x):
        return np.tanh(x)

    def d(self, x):
        return 1.0 / np.cosh(x) ** 2


@dataclass
class ModelSpec:
    """The full coefficient bundle (b, sigma, gamma, h, l, phi, f, g)."""

    b: object
    sigma: object
    gamma: object
    h: object
    l: object
    phi: object
    f: object
    g: object
    x0: float
    levy: LevyMeasure = EMPTY_LEVY
    u_min: float = -np.inf
    u_max: float = np.inf
    mean_field_in_state: bool = False
    name: str = "custom"

    def clip_control(self, v):
        return np.clip(v, self.u_min, self.u_max)


@dataclass
class ControlPolicy:
    """Feedback rule u(t_i) = clip(k0_i + k1_i*Y(t_i) + k2_i*Y(t_i)^2).

    knots has shape (N, 3).  The value at t_i depends only on the observation
    up to t_i, so the policy is adapted by construction.
    """

    knots: np.ndarray
    grid: TimeGrid
    u_min: float = -np.inf
    u_max: float = np.inf

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float)
        if self.knots.shape != (self.grid.N, 3):
            raise ConfigurationError(
                f"knots shape {self.knots.shape} != ({self.grid.N}, 3)")

    @classmethod
    def constant(cls, value, grid, u_min=-np.inf, u_max=np.inf):
        knots = np.zeros((grid.N, 3))
        knots[:, 0] = value
        return cls(knots=knots, grid=grid, u_min=u_min, u_max=u_max)

    def value(self, i, y):
        """Control at step i given Y(t_i) = y; vectorized over y."""
        k = self.knots[i]
        raw = k[0] + k[1] * y + k[2] * y * y
        return np.clip(raw, self.u_min, self.u_max)

    def perturbed(self, direction: "ControlPolicy", eps: float) -> "ControlPolicy":
        """Policy with knots shifted by eps * direction.knots (same basis)."""
        return ControlPolicy(knots=self.knots + eps * direction.knots,
                             grid=self.grid, u_min=self.u_min, u_max=self.u_max)

    def minus(self, other: "ControlPolicy") -> "ControlPolicy":
        return ControlPolicy(knots=self.knots - other.knots, grid=self.grid)


def eval_policy(policy: ControlPolicy, y_path, t: float):
    """Evaluate the policy at grid time t from the observation prefix.

    y_path holds Y(t_0), ..., Y(t_j) for some j with t_j >= t.
    """
    dt = policy.grid.dt
    i = round(t / dt)
    if abs(i * dt - t) > 1e-9 * max(1.0, policy.grid.T) or not (0 <= i < policy.grid.N):
        raise DomainError(f"time {t} is not an interior grid point")
    y_path = np.asarray(y_path, dtype=float)
    if y_path.shape[-1] < i + 1:
        raise DomainError(f"observation prefix of length {y_path.shape[-1]} "
                          f"does not cover t={t}")
    return policy.value(i, y_path[..., i])


# ---------------------------------------------------------------------------
# Built-in model catalog
# ---------------------------------------------------------------------------

@dataclass
class LQSpec:
    """Coefficients for the mean-field LQ model.

    dx = (A x + B ybar + C v) dt + (D x + E ybar + F v) dW1
         + sum_marks (S_m x + K_m ybar + I_m v) dNtilde,
    cost 0.5 * int [L (x - ybar)^2 + O (v - M)^2] dt
         + 0.5 * N_term (x(T) - ybar(T))^2.
    """

    A: float = 0.0
    B: float = 0.0
    C: float = 0.0
    D: float = 0.0
    E: float = 0.0
    F: float = 0.0
    S: tuple = ()
    K: tuple = ()
    I: tuple = ()
    L: float = 0.0
    O: float = 1.0
    M: float = 0.0
    N_term: float = 0.0
    x0: float = 1.0
    h0: float = 0.0
    h1: float = 0.0


@dataclass
class PlainLQSpec:
    """Coefficients for the non-mean-field-state LQ model.

    dx = (A x + B v) dt + (C x + D v) dW1 + sum_marks (Fz_m x + Gz_m v) dNtilde,
    cost 0.5 * int [L (x - ybar)^2 + (v - M)^2] dt
         + 0.5 * N_term (x(T) - ybar(T))^2,
    observation drift h(t, x) = h0 + h1 x (the factor-model drift).
    """

    A: float = 0.0
    B: float = 0.0
    C: float = 0.0
    D: float = 0.0
    Fz: tuple = ()
    Gz: tuple = ()
    L: float = 0.0
    M: float = 0.0
    N_term: float = 0.0
    x0: float = 1.0
    h0: float = 0.0
    h1: float = 0.0


def _mark_tuple(values, n_marks, name):
    if values is None or (isinstance(values, (tuple, list)) and len(values) == 0):
        return (0.0,) * n_marks
    vals = tuple(float(v) for v in np.broadcast_to(np.asarray(values, dtype=float),
                                                   (n_marks,)))
    return vals


def builtin_model(name: str, params=None, levy: LevyMeasure = EMPTY_LEVY,
                  u_min=-np.inf, u_max=np.inf) -> ModelSpec:
    """Construct one of the shipped models; partials pass the FD audit."""
    m = max(levy.n_marks, 1)
    if name == "lq_meanfield":
        p = params if isinstance(params, LQSpec) else LQSpec(**(params or {}))
        O_fn = _as_fn(p.O)
        for t in np.linspace(0.0, 1.0, 11):
            if O_fn(t) <= 0.0:
                raise ConfigurationError("control weight O(t) must stay positive")
        return ModelSpec(
            b=AffineCoefficient(cx=p.A, cy=p.B, cv=p.C),
            sigma=AffineCoefficient(cx=p.D, cy=p.E, cv=p.F),
            gamma=AffineJump(m, cx=_mark_tuple(p.S, m, "S"),
                             cy=_mark_tuple(p.K, m, "K"),
                             cv=_mark_tuple(p.I, m, "I")),
            h=AffineObservation(p.h0, p.h1),
            l=QuadraticRunningCost(L=p.L, O=p.O, M=p.M),
            phi=QuadraticTerminalCost(N=p.N_term),
            f=Identity(), g=Identity(),
            x0=p.x0, levy=levy, u_min=u_min, u_max=u_max,
            mean_field_in_state=True, name=name)
    if name == "lq_plain":
        p = params if isinstance(params, PlainLQSpec) else PlainLQSpec(**(params or {}))
        return ModelSpec(
            b=AffineCoefficient(cx=p.A, cv=p.B),
            sigma=AffineCoefficient(cx=p.C, cv=p.D),
            gamma=AffineJump(m, cx=_mark_tuple(p.Fz, m, "Fz"),
                             cv=_mark_tuple(p.Gz, m, "Gz")),
            h=AffineObservation(p.h0, p.h1),
            l=QuadraticRunningCost(L=p.L, O=1.0, M=p.M),
            phi=QuadraticTerminalCost(N=p.N_term),
            f=Identity(), g=Identity(),
            x0=p.x0, levy=levy, u_min=u_min, u_max=u_max,
            mean_field_in_state=False, name=name)
    if name == "bounded_nonlinear":
        p = dict(params or {})
        return ModelSpec(
            b=TanhCoefficient(a=p.get("b_a", 0.3), cv=p.get("b_v", 0.5)),
            sigma=TanhCoefficient(c0=p.get("s_0", 0.4), a=p.get("s_a", 0.2)),
            gamma=TanhJump(m, a=p.get("g_a", 0.15), cv=p.get("g_v", 0.05)),
            h=TanhObservation(a=p.get("h_a", 0.5)),
            l=QuadraticRunningCost(L=p.get("L", 1.0), O=p.get("O", 1.0),
                                   M=p.get("M", 0.0)),
            phi=QuadraticTerminalCost(N=p.get("N_term", 1.0)),
            f=Tanh(), g=Tanh(),
            x0=p.get("x0", 0.5), levy=levy, u_min=u_min, u_max=u_max,
            mean_field_in_state=False, name=name)
    raise ConfigurationError(f"unknown builtin model {name!r}")


def audit_partials(model: ModelSpec, n_points=100, seed=0, delta=1e-5, box=2.0):
    """Max relative error of analytic partials vs central differences.

    Samples (t, x, y, v) uniformly in [0,1] x [-box, box]^3 and compares every
    exposed partial.  Returns the worst relative error over all symbols.
    """
    rng = np.random.default_rng(seed)
    t = rng.uniform(0.0, 1.0, n_points)
    x = rng.uniform(-box, box, n_points)
    y = rng.uniform(-box, box, n_points)
    v = rng.uniform(-box, box, n_points)
    worst = 0.0

    def check(vec_fn, exact, arg):
        nonlocal worst
        for j in range(n_points):
            args = {"x": x[j], "y": y[j], "v": v[j]}
            args[arg] += delta
            hi = vec_fn(t[j], **args)
            args[arg] -= 2 * delta
            lo = vec_fn(t[j], **args)
            fd = (np.asarray(hi) - np.asarray(lo)) / (2 * delta)
            ex = np.asarray(exact(t[j], x=x[j], y=y[j], v=v[j]))
            err = np.max(np.abs(fd - ex) / np.maximum(1.0, np.abs(ex)))
            worst = max(worst, float(err))

    for coef in (model.b, model.sigma, model.gamma):
        check(lambda tt, x, y, v, c=coef: c.val(tt, x, y, v),
              lambda tt, x, y, v, c=coef: c.dx(tt, x, y, v), "x")
        check(lambda tt, x, y, v, c=coef: c.val(tt, x, y, v),
              lambda tt, x, y, v, c=coef: c.dy(tt, x, y, v), "y")
        check(lambda tt, x, y, v, c=coef: c.val(tt, x, y, v),
              lambda tt, x, y, v, c=coef: c.dv(tt, x, y, v), "v")
    check(lambda tt, x, y, v: model.h.val(tt, x),
          lambda tt, x, y, v: model.h.dx(tt, x), "x")
    check(lambda tt, x, y, v: model.l.val(tt, x, y, v),
          lambda tt, x, y, v: model.l.dx(tt, x, y, v), "x")
    check(lambda tt, x, y, v: model.l.val(tt, x, y, v),
          lambda tt, x, y, v: model.l.dy(tt, x, y, v), "y")
    check(lambda tt, x, y, v: model.l.val(tt, x, y, v),
          lambda tt, x, y, v: model.l.dv(tt, x, y, v), "v")
    check(lambda tt, x, y, v: model.phi.val(x, y),
          lambda tt, x, y, v: model.phi.dx(x, y), "x")
    check(lambda tt, x, y, v: model.phi.val(x, y),
          lambda tt, x, y, v: model.phi.dy(x, y), "y")
    check(lambda tt, x, y, v: model.f.val(x),
          lambda tt, x, y, v: model.f.d(x), "x")
    check(lambda tt, x, y, v: model.g.val(x),
          lambda tt, x, y, v: model.g.d(x), "x")
    return worst
