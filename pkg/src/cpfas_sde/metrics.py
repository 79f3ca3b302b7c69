"""Evaluation metrics: exact EMD between sample sets and trajectory MSE."""
from __future__ import annotations

import itertools
import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .errors import ConfigurationError
from .observations import ObservationSet
from .timegrid import Trajectory

DEFAULT_SIZE_CAP = 2000


@dataclass
class SampleSet:
    points: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if len(pts) < 1:
            raise ConfigurationError("a sample set needs at least one point")
        self.points = pts
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (len(pts),) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ConfigurationError("weights must be nonnegative, one per point, summing to 1")
            self.weights = w

    @property
    def uniform(self) -> bool:
        return self.weights is None

    def __len__(self):
        return len(self.points)


def _as_set(a) -> SampleSet:
    return a if isinstance(a, SampleSet) else SampleSet(a)


def _pot():
    # Keep POT from importing deep-learning backends it would never use here.
    for name in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{name}", "1")
    import ot
    return ot


def emd(a, b) -> float:
    """Exact 1-Wasserstein distance with Euclidean ground cost.

    Equal-size uniform sets are solved as an assignment problem; anything
    else goes to an exact network-simplex transport solver.
    """
    a, b = _as_set(a), _as_set(b)
    if a.points.shape[1] != b.points.shape[1]:
        raise ConfigurationError(
            f"dimension mismatch: {a.points.shape[1]} vs {b.points.shape[1]}")
    cost = cdist(a.points, b.points)
    if a.uniform and b.uniform and len(a) == len(b):
        r, c = linear_sum_assignment(cost)
        return float(cost[r, c].sum() / len(a))
    wa = a.weights if not a.uniform else np.full(len(a), 1.0 / len(a))
    wb = b.weights if not b.uniform else np.full(len(b), 1.0 / len(b))
    wb = wb * (wa.sum() / wb.sum())
    return float(_pot().emd2(wa, wb, cost, numItermax=10_000_000))


def emd_bruteforce(a, b) -> float:
    """Minimum over all perfect matchings; equal-size uniform sets only (tiny n)."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if len(a) != len(b):
        raise ConfigurationError("brute force needs equal-size sets")
    cost = cdist(a, b)
    n = len(a)
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / n


def emd_report(a, b, metric="emd", time=None, cap: int = DEFAULT_SIZE_CAP, seed=0) -> dict:
    """EMD with uniform subsampling of sets larger than ``cap``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    rng = np.random.default_rng(seed)
    sub = False
    if len(a) > cap:
        a = a[np.sort(rng.choice(len(a), cap, replace=False))]
        sub = True
    if len(b) > cap:
        b = b[np.sort(rng.choice(len(b), cap, replace=False))]
        sub = True
    return {"metric": metric, "time": time, "value": emd(a, b), "n_a": len(a), "n_b": len(b),
            "subsampled": sub, "seed": seed, "cap": cap}


def mean_trajectory(pool) -> Trajectory:
    pool = list(pool)
    if not pool:
        raise ConfigurationError("empty trajectory pool")
    grid = pool[0].grid
    for tr in pool[1:]:
        if not tr.grid.same_as(grid):
            raise ConfigurationError("trajectories live on different grids")
    stack = np.stack([tr.states for tr in pool])
    # fsum along the pool axis: exact, so independent of pool order.
    total = np.apply_along_axis(math.fsum, 0, stack) if len(pool) > 1 else stack[0]
    return Trajectory(grid, total / len(pool))


def trajectory_mse(mean: Trajectory, obs: ObservationSet) -> float:
    """Squared distance of ``mean`` to every observed point, averaged over slots and points."""
    if len(obs) == 0:
        raise ConfigurationError("no observation slots to compare against")
    per_slot = []
    for j in obs.indices():
        y = obs.slots[j].points
        m = obs.project(mean.states[j])
        per_slot.append(np.mean(np.sum((y - m) ** 2, axis=1)))
    return float(np.mean(per_slot))


def path_mse(a, b) -> float:
    """Mean over time of the squared Euclidean distance between two paths."""
    a = a.states if isinstance(a, Trajectory) else np.asarray(a, dtype=float)
    b = b.states if isinstance(b, Trajectory) else np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ConfigurationError(f"path shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.sum((a - b) ** 2, axis=-1)))


def linear_interpolation(obs: ObservationSet, times) -> np.ndarray:
    """Piecewise-linear path through single-point slots, held constant outside them."""
    idx = obs.indices()
    t_obs = np.asarray(times)[idx]
    y = np.stack([obs.slots[j].points[0] for j in idx])
    return np.stack([np.interp(times, t_obs, y[:, k]) for k in range(y.shape[1])], axis=1)
