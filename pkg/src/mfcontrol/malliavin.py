"""Pathwise stochastic-derivative operators and duality verifiers.

The Brownian derivative is realized as a symmetric finite difference along a
one-cell Cameron-Martin shift (the cell-averaged derivative density); the
Poisson derivative is the exact add-one-jump difference, with no step-size
parameter.  The duality verifiers check the two integration-by-parts
identities

    E[F int h dW]        = E[int h D_t F dt]
    E[F int int Psi dNt] = E[int int Psi D_{t,z}F mu(dz) dt]

by Monte Carlo over a shared ensemble.  Integrands come from a built-in
catalog so adaptedness holds by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .paths import LevyMeasure, NoiseEnsemble, PathBundle, TimeGrid, generate_ensemble

__all__ = [
    "PathFunctional",
    "DualityReport",
    "d_brownian",
    "d_poisson",
    "d_brownian_ensemble",
    "d_poisson_ensemble",
    "verify_duality_brownian",
    "verify_duality_poisson",
    "iterated_integral",
    "duality_fixtures",
]


@dataclass(frozen=True)
class PathFunctional:
    """A square-integrable functional of the driving noise.

    evaluator maps a NoiseEnsemble to an (n_paths,) array and must be pure.
    """

    label: str
    evaluator: object

    def __call__(self, noise: NoiseEnsemble) -> np.ndarray:
        return np.asarray(self.evaluator(noise), dtype=float)


def _as_ensemble(path) -> NoiseEnsemble:
    if isinstance(path, NoiseEnsemble):
        return path
    if isinstance(path, PathBundle):
        return NoiseEnsemble.from_bundles([path])
    return NoiseEnsemble.from_bundles(list(path))


def default_eps(grid: TimeGrid) -> float:
    # balances truncation against cancellation for the cell-shift difference
    return np.sqrt(grid.dt) * 1e-2


def d_brownian_ensemble(F: PathFunctional, noise: NoiseEnsemble, which: str,
                        eps: float | None = None) -> np.ndarray:
    """Cell-wise derivative estimates, shape (n, N); mutates noise transiently."""
    if which not in ("W1", "Y"):
        raise DomainError(f"unknown Brownian component {which!r}")
    if eps is None:
        eps = default_eps(noise.grid)
    arr = noise.dW1 if which == "W1" else noise.dY
    n, N = arr.shape
    out = np.empty((n, N))
    for i in range(N):
        col = arr[:, i].copy()
        arr[:, i] = col + eps
        up = F(noise)
        arr[:, i] = col - eps
        dn = F(noise)
        arr[:, i] = col
        out[:, i] = (up - dn) / (2.0 * eps)
    return out


def d_poisson_ensemble(F: PathFunctional, noise: NoiseEnsemble) -> np.ndarray:
    """Exact add-one-jump differences, shape (n, N, n_marks)."""
    n, N, m = noise.counts.shape
    base = F(noise)
    out = np.empty((n, N, m))
    for i in range(N):
        for mk in range(m):
            noise.counts[:, i, mk] += 1.0
            out[:, i, mk] = F(noise) - base
            noise.counts[:, i, mk] -= 1.0
    return out


def d_brownian(F: PathFunctional, path: PathBundle, which: str,
               eps: float | None = None) -> np.ndarray:
    """Spec-level operator on a single path; returns array[N]."""
    if eps is not None and eps <= 0:
        raise DomainError("eps must be positive")
    return d_brownian_ensemble(F, _as_ensemble(path), which, eps)[0]


def d_poisson(F: PathFunctional, path: PathBundle) -> np.ndarray:
    """Spec-level operator on a single path; returns array[N, n_marks]."""
    return d_poisson_ensemble(F, _as_ensemble(path))[0]


# ---------------------------------------------------------------------------
# Built-in adapted integrands
# ---------------------------------------------------------------------------

def _left_point_levels(inc):
    """Levels at cell left endpoints: 0, inc_0, inc_0+inc_1, ..."""
    lev = np.cumsum(inc, axis=1)
    return np.concatenate([np.zeros((inc.shape[0], 1)), lev[:, :-1]], axis=1)


def brownian_integrand(name: str, noise: NoiseEnsemble) -> np.ndarray:
    """(n, N) adapted process values h(t_i)."""
    n, N = noise.dW1.shape
    if name == "one":
        return np.ones((n, N))
    if name == "W1":
        return _left_point_levels(noise.dW1)
    if name == "Y":
        return _left_point_levels(noise.dY)
    raise DomainError(f"unknown integrand {name!r}")


def poisson_integrand(name: str, noise: NoiseEnsemble) -> np.ndarray:
    """(n, N, m) adapted field values Psi(t_i, z_m)."""
    n, N, m = noise.counts.shape
    if name == "one":
        return np.ones((n, N, m))
    if name == "mark0":
        out = np.zeros((n, N, m))
        out[:, :, 0] = 1.0
        return out
    if name == "z":
        zs = noise.levy.zs if noise.levy.n_marks else np.zeros(m)
        return np.broadcast_to(zs, (n, N, m)).astype(float)
    raise DomainError(f"unknown integrand {name!r}")


@dataclass
class DualityReport:
    fixture: str
    lhs: float
    rhs: float
    se: float

    @property
    def diff(self) -> float:
        return self.lhs - self.rhs

    @property
    def ok(self) -> bool:
        return abs(self.diff) <= 3.0 * self.se


def _resolve_noise(grid, levy, n_paths, seed, noise):
    if noise is not None:
        return noise
    return generate_ensemble(grid, levy, n_paths, seed)


def verify_duality_brownian(F: PathFunctional, integrand: str, grid: TimeGrid = None,
                            levy: LevyMeasure = None, n_paths: int = 10_000,
                            seed: int = 0, which: str = "W1",
                            eps: float | None = None,
                            noise: NoiseEnsemble = None) -> DualityReport:
    noise = _resolve_noise(grid, levy, n_paths, seed, noise)
    dt = noise.grid.dt
    h = brownian_integrand(integrand, noise)
    inc = noise.dW1 if which == "W1" else noise.dY
    fvals = F(noise)
    lhs_p = fvals * (h * inc).sum(axis=1)
    d = d_brownian_ensemble(F, noise, which, eps)
    rhs_p = (h * d).sum(axis=1) * dt
    diff = lhs_p - rhs_p
    n = diff.shape[0]
    return DualityReport(fixture=f"{F.label}|{integrand}|{which}",
                         lhs=float(lhs_p.mean()), rhs=float(rhs_p.mean()),
                         se=float(diff.std(ddof=1) / np.sqrt(n)))


def verify_duality_poisson(F: PathFunctional, integrand: str, grid: TimeGrid = None,
                           levy: LevyMeasure = None, n_paths: int = 10_000,
                           seed: int = 0, noise: NoiseEnsemble = None) -> DualityReport:
    noise = _resolve_noise(grid, levy, n_paths, seed, noise)
    dt = noise.grid.dt
    m = noise.counts.shape[2]
    rates = noise.levy.rates if noise.levy.n_marks else np.zeros(m)
    psi = poisson_integrand(integrand, noise)
    comp = noise.counts - rates * dt
    fvals = F(noise)
    lhs_p = fvals * (psi * comp).sum(axis=(1, 2))
    d = d_poisson_ensemble(F, noise)
    rhs_p = (psi * d * rates).sum(axis=(1, 2)) * dt
    diff = lhs_p - rhs_p
    n = diff.shape[0]
    return DualityReport(fixture=f"{F.label}|{integrand}|N",
                         lhs=float(lhs_p.mean()), rhs=float(rhs_p.mean()),
                         se=float(diff.std(ddof=1) / np.sqrt(n)))


def iterated_integral(order: int, kernel: str, path, kind: str = "W1") -> np.ndarray:
    """Discrete iterated integral of order 1 or 2 with a built-in kernel.

    kind selects the driving martingale: W1 increments or the total
    compensated jump measure.  Returns per-path values.
    """
    if order not in (1, 2):
        raise DomainError(f"unsupported order {order}")
    if kernel != "one":
        raise DomainError(f"unknown kernel {kernel!r}")
    noise = _as_ensemble(path)
    dt = noise.grid.dt
    if kind == "W1":
        inc = noise.dW1
    elif kind == "poisson":
        m = noise.counts.shape[2]
        rates = noise.levy.rates if noise.levy.n_marks else np.zeros(m)
        inc = (noise.counts - rates * dt).sum(axis=2)
    else:
        raise DomainError(f"unknown kind {kind!r}")
    if order == 1:
        return inc.sum(axis=1)
    # 2 * sum_{i<j} inc_i inc_j, via running prefix sums
    prefix = _left_point_levels(inc)
    return 2.0 * (prefix * inc).sum(axis=1)


# ---------------------------------------------------------------------------
# Shipped fixtures
# ---------------------------------------------------------------------------

def _w1_terminal(noise):
    return noise.dW1.sum(axis=1)


def _w1_terminal_sq(noise):
    s = noise.dW1.sum(axis=1)
    return s * s


def _y_times_w1(noise):
    return noise.dY.sum(axis=1) * noise.dW1.sum(axis=1)


def _compensated_total(noise):
    dt = noise.grid.dt
    m = noise.counts.shape[2]
    rates = noise.levy.rates if noise.levy.n_marks else np.zeros(m)
    return (noise.counts - rates * dt).sum(axis=(1, 2))


def _compensated_total_sq(noise):
    v = _compensated_total(noise)
    return v * v


def _mark0_count(noise):
    return noise.counts[:, :, 0].sum(axis=1)


F_W1T = PathFunctional("W1(T)", _w1_terminal)
F_W1T_SQ = PathFunctional("W1(T)^2", _w1_terminal_sq)
F_YW1 = PathFunctional("Y(T)W1(T)", _y_times_w1)
F_NTILDE = PathFunctional("Ntilde", _compensated_total)
F_NTILDE_SQ = PathFunctional("Ntilde^2", _compensated_total_sq)
F_MARK0 = PathFunctional("count_mark0", _mark0_count)


def duality_fixtures():
    """The shipped duality test suite: (kind, F, integrand) triples."""
    return [
        ("brownian", F_W1T, "one"),
        ("brownian", F_W1T_SQ, "one"),
        ("brownian", F_W1T_SQ, "W1"),
        ("brownian", F_YW1, "one"),
        ("poisson", F_NTILDE, "one"),
        ("poisson", F_NTILDE_SQ, "one"),
        ("poisson", F_MARK0, "mark0"),
        ("poisson", F_W1T_SQ, "one"),
    ]
