"""Observation slots and particle log-weights.

Two likelihoods are supported per slot:

``single``
    One observed point ``y``; ``log w = -|y - Hx|^2 / (2 sigma^2)``.
``knn``
    A point cloud (a partially observed marginal, or samples of the terminal
    distribution).  The log-weight sums the squared distances to the ``h``
    nearest points, scaled by ``-1 / (2 sigma^2)``.

Constant terms are dropped everywhere since weights are normalized.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import ConfigurationError, DegenerateWeightsError, ParseError
from .timegrid import TimeGrid

MODES = ("single", "knn")

# Max number of particle/point pairs materialized at once in the KNN search.
_KNN_CHUNK = 1 << 21


@dataclass
class ObservationSlot:
    time_index: int
    points: np.ndarray
    sigma_obs: float
    h_nearest: int = 1
    mode: str = "single"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[None, :]
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise ConfigurationError(f"slot {self.time_index}: points must be a non-empty 2-D array")
        self.points = pts
        if self.mode not in MODES:
            raise ConfigurationError(f"slot {self.time_index}: unknown mode {self.mode!r}")
        if not self.sigma_obs > 0:
            raise ConfigurationError(f"slot {self.time_index}: sigma_obs must be positive")
        self.h_nearest = int(self.h_nearest)
        if self.mode == "single" and len(pts) != 1:
            raise ConfigurationError(
                f"slot {self.time_index}: mode 'single' needs exactly one point, got {len(pts)}")
        if self.mode == "knn" and not 1 <= self.h_nearest <= len(pts):
            raise ConfigurationError(
                f"slot {self.time_index}: h_nearest={self.h_nearest} outside [1, {len(pts)}]")

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def log_weight_single(slot: ObservationSlot, x_proj) -> np.ndarray:
    x_proj = np.asarray(x_proj, dtype=float)
    if x_proj.shape[-1] != slot.dim:
        raise ConfigurationError(f"observation dimension {slot.dim} != projected state {x_proj.shape[-1]}")
    r = slot.points[0] - x_proj
    return -np.sum(r * r, axis=-1) / (2.0 * slot.sigma_obs ** 2)


def _knn_sq_sums(points, x, h):
    """Sum of the ``h`` smallest squared distances from each row of ``x`` to ``points``.

    The selected distances are summed in ascending order, which makes the
    result independent of the order of ``points``.
    """
    n, s = len(x), len(points)
    out = np.empty(n)
    step = max(1, _KNN_CHUNK // max(1, s * points.shape[1]))
    for lo in range(0, n, step):
        diff = x[lo:lo + step, None, :] - points[None, :, :]
        d2 = np.einsum("nsk,nsk->ns", diff, diff)
        if h < s:
            d2 = np.partition(d2, h - 1, axis=1)[:, :h]
        out[lo:lo + step] = np.sort(d2, axis=1).sum(axis=1)
    return out


def log_weight_knn(slot: ObservationSlot, x_proj) -> np.ndarray:
    x_proj = np.asarray(x_proj, dtype=float)
    if x_proj.shape[-1] != slot.dim:
        raise ConfigurationError(f"observation dimension {slot.dim} != projected state {x_proj.shape[-1]}")
    if slot.h_nearest > len(slot.points):
        raise ConfigurationError("h_nearest exceeds number of points")
    single = x_proj.ndim == 1
    x2 = np.atleast_2d(x_proj)
    lw = -_knn_sq_sums(slot.points, x2, slot.h_nearest) / (2.0 * slot.sigma_obs ** 2)
    return lw[0] if single else lw


@dataclass
class ObservationSet:
    slots: Dict[int, ObservationSlot] = field(default_factory=dict)
    obs_matrix: Optional[np.ndarray] = None
    terminal_index: Optional[int] = None

    def __post_init__(self):
        for j, slot in self.slots.items():
            if slot.time_index != j:
                raise ConfigurationError(f"slot keyed {j} has time_index {slot.time_index}")
        if self.obs_matrix is not None:
            H = np.atleast_2d(np.asarray(self.obs_matrix, dtype=float))
            if np.linalg.matrix_rank(H) != H.shape[0]:
                raise ConfigurationError("observation matrix must have full row rank")
            self.obs_matrix = H
        if self.terminal_index is not None and self.terminal_index not in self.slots:
            raise ConfigurationError("terminal flag set on a missing slot")

    def add(self, slot: ObservationSlot, terminal: bool = False):
        if slot.time_index in self.slots:
            raise ConfigurationError(f"duplicate observation slot at grid index {slot.time_index}")
        self.slots[slot.time_index] = slot
        if terminal:
            self.terminal_index = slot.time_index

    def project(self, x):
        if self.obs_matrix is None:
            return np.asarray(x, dtype=float)
        return np.asarray(x, dtype=float) @ self.obs_matrix.T

    def indices(self):
        return sorted(self.slots)

    def __len__(self):
        return len(self.slots)

    def __contains__(self, j):
        return j in self.slots


def weights_at(obs: ObservationSet, j: int, particles) -> Optional[np.ndarray]:
    """Log-weights of ``particles`` (N x d_x) at grid index ``j``.

    Returns ``None`` when there is no slot at ``j``; callers treat that as
    uniform weights.
    """
    slot = obs.slots.get(j)
    if slot is None:
        return None
    x_proj = obs.project(np.atleast_2d(particles))
    if slot.mode == "single":
        return log_weight_single(slot, x_proj)
    return log_weight_knn(slot, x_proj)


def logsumexp(lw) -> float:
    m = np.max(lw)
    if not np.isfinite(m):
        return float(m)
    return float(m + np.log(np.sum(np.exp(lw - m))))


def normalize_log_weights(lw) -> np.ndarray:
    lw = np.asarray(lw, dtype=float)
    if lw.size == 0 or not np.any(np.isfinite(lw)) or np.any(np.isnan(lw)):
        raise DegenerateWeightsError("log-weights are all -inf or contain NaN")
    # Subtracting the max (not logsumexp) keeps the result exactly shift-invariant
    # whenever the shifted inputs are themselves exact.
    p = np.exp(lw - np.max(lw))
    return p / p.sum()


def read_observations_csv(path, grid: TimeGrid):
    """Read ``t,y0,...,y{d-1}`` rows and group them by nearest grid index.

    Returns ``{grid_index: (S, d) array}`` in ascending index order.
    """
    groups = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "t" or len(header) < 2:
            raise ParseError("expected header 't,y0,...'", path=path, line=1)
        width = len(header)
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != width:
                raise ParseError(f"expected {width} fields, got {len(rec)}", path=path, line=lineno)
            try:
                vals = [float(v) for v in rec]
            except ValueError as exc:
                raise ParseError(str(exc), path=path, line=lineno) from None
            try:
                j = grid.index_of(vals[0])
            except ConfigurationError as exc:
                raise ParseError(str(exc), path=path, line=lineno) from None
            groups.setdefault(j, []).append(vals[1:])
    if not groups:
        raise ParseError("no observation rows", path=path)
    return {j: np.array(groups[j]) for j in sorted(groups)}


def write_observations_csv(path, obs: ObservationSet, grid: TimeGrid):
    idx = obs.indices()
    if not idx:
        raise ConfigurationError("observation set is empty")
    d = obs.slots[idx[0]].dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"y{k}" for k in range(d)])
        for j in idx:
            for y in obs.slots[j].points:
                w.writerow([format(float(grid.times[j]), ".17g")] + [format(float(v), ".17g") for v in y])
