"""Driving-noise generation on a uniform grid.

Paths are generated under the reference measure, where (W1, Y) is a
two-dimensional Brownian motion and the jump measure is an independent
finite-activity compound Poisson process with finitely many marks.  Two
path perturbations are provided: inserting one jump (the add-one-jump
derivative) and shifting a single Brownian increment (a Cameron-Martin
direction supported on one grid cell).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DomainError

__all__ = [
    "TimeGrid",
    "LevyMeasure",
    "PathBundle",
    "NoiseEnsemble",
    "generate_paths",
    "generate_ensemble",
    "insert_jump",
    "shift_brownian",
]


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_N = T."""

    T: float
    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ConfigurationError(f"grid needs at least one step, got N={self.N}")
        if not (self.T > 0):
            raise ConfigurationError(f"horizon must be positive, got T={self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    def cell_of(self, t: float) -> int:
        """Index of the cell [t_i, t_{i+1}) containing t; t=T maps to the last cell."""
        if not (0.0 <= t <= self.T):
            raise DomainError(f"time {t} outside [0, {self.T}]")
        return min(int(np.floor(t / self.dt)), self.N - 1)


@dataclass(frozen=True)
class LevyMeasure:
    """Finite list of (jump size, rate) marks; integrals against mu are finite sums."""

    marks: tuple

    def __post_init__(self):
        marks = tuple((float(z), float(r)) for z, r in self.marks)
        object.__setattr__(self, "marks", marks)
        for z, r in marks:
            if z == 0.0:
                raise ConfigurationError("jump marks must be nonzero")
            if r <= 0.0:
                raise ConfigurationError("mark rates must be strictly positive")

    @property
    def n_marks(self) -> int:
        return len(self.marks)

    @property
    def zs(self) -> np.ndarray:
        return np.array([z for z, _ in self.marks])

    @property
    def rates(self) -> np.ndarray:
        return np.array([r for _, r in self.marks])

    @property
    def total_rate(self) -> float:
        return float(sum(r for _, r in self.marks))


EMPTY_LEVY = LevyMeasure(marks=())


@dataclass(frozen=True)
class PathBundle:
    """One simulated scenario of driving noise.

    jumps is a tuple of (time, mark_index) sorted by time, times in (0, T].
    """

    dW1: np.ndarray
    dY: np.ndarray
    jumps: tuple
    seed: int
    grid: TimeGrid
    levy: LevyMeasure = EMPTY_LEVY

    def jump_count(self, mark_index: int | None = None) -> int:
        if mark_index is None:
            return len(self.jumps)
        return sum(1 for _, m in self.jumps if m == mark_index)


def _path_rng(seed: int, k: int) -> np.random.Generator:
    # Counter-style stream: path k's state depends only on (seed, k), so the
    # ensemble is reproducible regardless of generation order.
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(k,))
    return np.random.Generator(np.random.PCG64(ss))


def generate_paths(grid: TimeGrid, levy: LevyMeasure, n_paths: int, seed: int):
    """Generate n_paths independent PathBundles under the reference measure."""
    if n_paths < 1:
        raise ConfigurationError(f"n_paths must be >= 1, got {n_paths}")
    sd = np.sqrt(grid.dt)
    out = []
    for k in range(n_paths):
        rng = _path_rng(seed, k)
        dW1 = rng.normal(0.0, sd, grid.N)
        dY = rng.normal(0.0, sd, grid.N)
        events = []
        for m, (_, rate) in enumerate(levy.marks):
            count = rng.poisson(rate * grid.T)
            if count:
                # times in (0, T]
                times = grid.T * (1.0 - rng.random(count))
                events.extend((float(t), m) for t in times)
        events.sort()
        out.append(PathBundle(dW1=dW1, dY=dY, jumps=tuple(events),
                              seed=seed, grid=grid, levy=levy))
    return out


def insert_jump(path: PathBundle, t: float, mark_index: int) -> PathBundle:
    """Copy of path with one extra jump at (t, mark_index); the input is unchanged."""
    if not (0.0 < t <= path.grid.T):
        raise DomainError(f"jump time {t} outside (0, {path.grid.T}]")
    if not (0 <= mark_index < path.levy.n_marks):
        raise DomainError(f"mark index {mark_index} invalid for {path.levy.n_marks} marks")
    jumps = sorted(path.jumps + ((float(t), int(mark_index)),))
    return replace(path, jumps=tuple(jumps))


def shift_brownian(path: PathBundle, which: str, s: float, eps: float) -> PathBundle:
    """Copy of path with the increment of cell containing s raised by eps."""
    if which not in ("W1", "Y"):
        raise DomainError(f"unknown Brownian component {which!r}")
    dt = path.grid.dt
    idx = round(s / dt)
    if not (0 <= idx < path.grid.N) or abs(idx * dt - s) > 1e-9 * max(1.0, path.grid.T):
        raise DomainError(f"shift time {s} does not align to a grid cell")
    if which == "W1":
        dW1 = path.dW1.copy()
        dW1[idx] += eps
        return replace(path, dW1=dW1)
    dY = path.dY.copy()
    dY[idx] += eps
    return replace(path, dY=dY)


@dataclass
class NoiseEnsemble:
    """Stacked noise arrays for vectorized simulation.

    dW1, dY: (n, N); counts: (n, N, n_marks) jump counts per cell per mark.
    """

    dW1: np.ndarray
    dY: np.ndarray
    counts: np.ndarray
    grid: TimeGrid
    levy: LevyMeasure

    @property
    def n_paths(self) -> int:
        return self.dW1.shape[0]

    @classmethod
    def from_bundles(cls, bundles) -> "NoiseEnsemble":
        if not bundles:
            raise ConfigurationError("empty path list")
        grid = bundles[0].grid
        levy = bundles[0].levy
        for b in bundles:
            if b.grid != grid:
                raise ConfigurationError("all paths must share one grid")
        n = len(bundles)
        m = levy.n_marks
        dW1 = np.stack([b.dW1 for b in bundles])
        dY = np.stack([b.dY for b in bundles])
        counts = np.zeros((n, grid.N, max(m, 1)))
        for k, b in enumerate(bundles):
            for t, mk in b.jumps:
                counts[k, grid.cell_of(t), mk] += 1.0
        return cls(dW1=dW1, dY=dY, counts=counts, grid=grid, levy=levy)

    def copy(self) -> "NoiseEnsemble":
        return NoiseEnsemble(self.dW1.copy(), self.dY.copy(), self.counts.copy(),
                             self.grid, self.levy)


def generate_ensemble(grid: TimeGrid, levy: LevyMeasure, n_paths: int, seed: int) -> NoiseEnsemble:
    """generate_paths followed by stacking into arrays."""
    return NoiseEnsemble.from_bundles(generate_paths(grid, levy, n_paths, seed))
