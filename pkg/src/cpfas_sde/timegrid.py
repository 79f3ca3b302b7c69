"""Time discretization, SDE model types and the Euler-Maruyama integrator.

The dynamics are ``dx = f(x, t) dt + g(t) dB`` with Gaussian increments of
variance ``g(t)^2 dt`` per coordinate.  ``g`` is evaluated at the left end of
each step.  States are handled as ``(..., d)`` arrays so that every routine
works on a single state vector or on a batch of particles.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateTransitionError,
    NumericalDivergenceError,
    ParseError,
)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray
    deltas: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        deltas = np.asarray(self.deltas, dtype=float)
        if times.ndim != 1 or len(times) < 2:
            raise ConfigurationError("a time grid needs at least two points")
        if len(deltas) != len(times) - 1:
            raise ConfigurationError("deltas must have one entry fewer than times")
        if np.any(deltas <= 0) or np.any(np.diff(times) <= 0):
            raise ConfigurationError("grid times must be strictly increasing")
        times.setflags(write=False)
        deltas.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "deltas", deltas)

    @property
    def t0(self) -> float:
        return float(self.times[0])

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def n_steps(self) -> int:
        return len(self.deltas)

    def __len__(self):
        return len(self.times)

    def index_of(self, t: float) -> int:
        """Grid index nearest to ``t``; raises if ``t`` is off-grid by more than half a step."""
        j = int(np.argmin(np.abs(self.times - t)))
        half = 0.5 * self.deltas[min(j, self.n_steps - 1)]
        if abs(self.times[j] - t) > half:
            raise ConfigurationError(
                f"time {t!r} does not lie within half a step of any grid point "
                f"(nearest {self.times[j]!r})")
        return j

    def same_as(self, other: "TimeGrid") -> bool:
        return (len(self) == len(other)
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.deltas, other.deltas))


def make_uniform_grid(t0: float, T: float, dt: float) -> TimeGrid:
    if not (T > t0):
        raise ConfigurationError(f"need T > t0, got (t0={t0}, T={T}, dt={dt})")
    if not (dt > 0):
        raise ConfigurationError(f"need dt > 0, got (t0={t0}, T={T}, dt={dt})")
    ratio = (T - t0) / dt
    n = int(round(ratio))
    if n < 1 or abs(ratio - n) > 1e-9:
        raise ConfigurationError(
            f"(T - t0) / dt is not an integer for (t0={t0}, T={T}, dt={dt}): {ratio!r}")
    times = t0 + dt * np.arange(n + 1, dtype=float)
    times[-1] = T
    return TimeGrid(times, np.full(n, float(dt)))


class DiffusionSchedule:
    """Scalar diffusion coefficient g(t), constant or piecewise linear.

    Piecewise-linear schedules interpolate between ``(time, value)``
    breakpoints and clamp outside the first and last breakpoint.
    """

    def __init__(self, breakpoints: Sequence[float], values: Sequence[float]):
        bp = np.asarray(breakpoints, dtype=float).ravel()
        vals = np.asarray(values, dtype=float).ravel()
        if len(bp) != len(vals) or len(vals) == 0:
            raise ConfigurationError("breakpoints and values must have equal, nonzero length")
        if np.any(np.diff(bp) < 0):
            raise ConfigurationError("schedule breakpoints must be nondecreasing")
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ConfigurationError("diffusion values must be finite and nonnegative")
        self.breakpoints = bp
        self.values = vals

    @classmethod
    def constant(cls, value: float) -> "DiffusionSchedule":
        return cls([0.0], [value])

    @classmethod
    def piecewise_linear(cls, breakpoints, values) -> "DiffusionSchedule":
        return cls(breakpoints, values)

    @property
    def kind(self) -> str:
        return "constant" if len(self.values) == 1 else "piecewise-linear"

    def __call__(self, t):
        if len(self.values) == 1:
            if np.ndim(t) == 0:
                return float(self.values[0])
            return np.full(np.shape(t), self.values[0])
        out = np.interp(t, self.breakpoints, self.values)
        return float(out) if np.ndim(t) == 0 else out

    def to_dict(self) -> dict:
        return {"breakpoints": self.breakpoints.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        if "value" in d:
            return cls.constant(d["value"])
        return cls(d["breakpoints"], d["values"])

    def __repr__(self):
        if self.kind == "constant":
            return f"DiffusionSchedule.constant({self.values[0]!r})"
        return f"DiffusionSchedule({self.breakpoints.tolist()}, {self.values.tolist()})"


# Drift functions.  Plain classes instead of lambdas so models pickle into
# worker processes.

class ZeroDrift:
    def __call__(self, x, t):
        return np.zeros_like(x, dtype=float)

    def __repr__(self):
        return "ZeroDrift()"


class LinearDrift:
    """f(x) = A x."""

    def __init__(self, A):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        if self.A.shape == (1, 1):
            return self.A[0, 0] * x
        return x @ self.A.T

    def __repr__(self):
        return f"LinearDrift({self.A.tolist()})"


class DoubleWellDrift:
    """f(x) = scale * x * (1 - x^2), stable wells at x = +-1."""

    def __init__(self, scale: float = 4.0):
        self.scale = float(scale)

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        return self.scale * x * (1.0 - x * x)

    def __repr__(self):
        return f"DoubleWellDrift({self.scale})"


# Initial distributions; each is called as sampler(n, rng) -> (n, d).

class PointMass:
    def __init__(self, loc):
        self.loc = np.atleast_1d(np.asarray(loc, dtype=float))

    @property
    def dim(self):
        return len(self.loc)

    def __call__(self, n, rng):
        return np.tile(self.loc, (n, 1))


class GaussianInit:
    def __init__(self, mean, std):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        self.std = np.broadcast_to(np.asarray(std, dtype=float), self.mean.shape).copy()

    @property
    def dim(self):
        return len(self.mean)

    def __call__(self, n, rng):
        return self.mean + self.std * rng.standard_normal((n, len(self.mean)))


class EmpiricalInit:
    """Resamples rows of a fixed point cloud uniformly with replacement."""

    def __init__(self, points):
        self.points = np.atleast_2d(np.asarray(points, dtype=float))

    @property
    def dim(self):
        return self.points.shape[1]

    def __call__(self, n, rng):
        return self.points[rng.integers(len(self.points), size=n)].copy()


@dataclass
class SdeModel:
    drift: Callable
    diffusion: DiffusionSchedule
    dim: int
    init_sampler: Callable = None

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigurationError("state dimension must be positive")
        if self.init_sampler is None:
            self.init_sampler = PointMass(np.zeros(self.dim))

    def f(self, x, t):
        out = self.drift(x, t)
        if np.shape(out) != np.shape(x):
            raise ConfigurationError(
                f"drift returned shape {np.shape(out)} for input of shape {np.shape(x)}")
        return out

    def sample_init(self, n: int, rng) -> np.ndarray:
        x0 = np.asarray(self.init_sampler(n, rng), dtype=float)
        if x0.shape != (n, self.dim):
            raise ConfigurationError(
                f"init sampler returned shape {x0.shape}, expected {(n, self.dim)}")
        return x0


@dataclass
class Trajectory:
    grid: TimeGrid
    states: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if self.states.shape[0] != len(self.grid):
            raise ConfigurationError(
                f"trajectory has {self.states.shape[0]} rows for a grid of {len(self.grid)} points")

    @property
    def dim(self) -> int:
        return self.states.shape[1]


def _check_finite_drift(fx, t, x):
    if not np.all(np.isfinite(fx)):
        raise NumericalDivergenceError(f"non-finite drift at t={t}", t=t, x=np.array(x, copy=True))


def em_step(model: SdeModel, x, t: float, dt: float, noise) -> np.ndarray:
    """One Euler-Maruyama step: ``x + f(x, t) dt + g(t) sqrt(dt) noise``."""
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.dim:
        raise ConfigurationError(f"state dimension {x.shape[-1]} != model dimension {model.dim}")
    fx = model.f(x, t)
    _check_finite_drift(fx, t, x)
    return x + fx * dt + model.diffusion(t) * math.sqrt(dt) * np.asarray(noise, dtype=float)


def transition_logpdf(model: SdeModel, x_prev, x_next, t: float, dt: float):
    """Log density of the Euler-Maruyama transition ``x_prev -> x_next``.

    Broadcasts over leading dimensions; the last axis is summed.
    """
    if not dt > 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    g = model.diffusion(t)
    if g <= 0:
        raise DegenerateTransitionError(f"g(t) = 0 at t={t}: transition density undefined")
    x_prev = np.asarray(x_prev, dtype=float)
    x_next = np.asarray(x_next, dtype=float)
    fx = model.f(x_prev, t)
    _check_finite_drift(fx, t, x_prev)
    var = g * g * dt
    resid = x_next - (x_prev + fx * dt)
    d = resid.shape[-1]
    return -0.5 * np.sum(resid * resid, axis=-1) / var - 0.5 * d * (_LOG_2PI + math.log(var))


def simulate_array(model: SdeModel, grid: TimeGrid, n_paths: int, seed) -> np.ndarray:
    """Simulate paths; returns an array of shape ``(n_paths, len(grid), dim)``.

    Initial states come from one stream; each path's Brownian increments come
    from its own child stream, so path ``i`` does not depend on ``n_paths``.
    """
    if n_paths < 1:
        raise ConfigurationError("n_paths must be at least 1")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    init_ss, noise_root = ss.spawn(2)
    x = model.sample_init(n_paths, np.random.default_rng(init_ss))
    noise = np.empty((n_paths, grid.n_steps, model.dim))
    for i, child in enumerate(noise_root.spawn(n_paths)):
        noise[i] = np.random.default_rng(child).standard_normal((grid.n_steps, model.dim))
    out = np.empty((n_paths, len(grid), model.dim))
    out[:, 0] = x
    for j in range(grid.n_steps):
        x = em_step(model, x, grid.times[j], grid.deltas[j], noise[:, j])
        out[:, j + 1] = x
    return out


def simulate(model: SdeModel, grid: TimeGrid, n_paths: int, seed) -> list:
    arr = simulate_array(model, grid, n_paths, seed)
    return [Trajectory(grid, arr[i]) for i in range(n_paths)]


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_trajectories_csv(path, trajectories, ids: Optional[Sequence] = None, prefix="x",
                           id_column="path_id"):
    """Write ``t,x0,...,x{d-1},path_id`` rows, one per (path, time) pair."""
    trajectories = list(trajectories)
    if not trajectories:
        raise ConfigurationError("nothing to write")
    d = trajectories[0].states.shape[1]
    if ids is None:
        ids = range(len(trajectories))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"{prefix}{k}" for k in range(d)] + [id_column])
        for pid, tr in zip(ids, trajectories):
            times = tr.grid.times
            for j in range(len(times)):
                w.writerow([_fmt(times[j])] + [_fmt(v) for v in tr.states[j]] + [pid])


def read_trajectories_csv(path, grid: Optional[TimeGrid] = None):
    """Inverse of :func:`write_trajectories_csv`; returns ``(ids, array)``.

    The array has shape ``(n_paths, n_times, d)``.  Paths keep file order.
    """
    rows = {}
    times = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0] != "t":
            raise ParseError("missing 't,...' header", path=path, line=1)
        d = len(header) - 2
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != d + 2:
                raise ParseError(f"expected {d + 2} fields, got {len(rec)}", path=path, line=lineno)
            try:
                vals = [float(v) for v in rec[:-1]]
            except ValueError as exc:
                raise ParseError(str(exc), path=path, line=lineno) from None
            pid = rec[-1]
            rows.setdefault(pid, []).append(vals[1:])
            times.setdefault(pid, []).append(vals[0])
    ids = list(rows)
    arr = np.array([rows[k] for k in ids], dtype=float)
    if grid is not None and arr.shape[1] != len(grid):
        raise ParseError(f"trajectories have {arr.shape[1]} rows, grid has {len(grid)}", path=path)
    return ids, arr
