"""Synthetic experiment generators and CSV ingestion of marginal samples.

Every experiment has a parameter dictionary (``DEFAULTS[name]``) holding the
published settings; callers override entries and pass the merged result to
:func:`generate` or :func:`load`.  Generated data round-trips through
``observations.csv`` / ``truth.csv`` so later pipeline stages rebuild the
same model and observation set from disk.
"""
from __future__ import annotations

import copy
import csv
import json
import os
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ParseError
from .observations import ObservationSet, ObservationSlot, read_observations_csv, write_observations_csv
from .timegrid import (
    DiffusionSchedule,
    DoubleWellDrift,
    EmpiricalInit,
    GaussianInit,
    PointMass,
    SdeModel,
    TimeGrid,
    Trajectory,
    ZeroDrift,
    make_uniform_grid,
    read_trajectories_csv,
    simulate_array,
    write_trajectories_csv,
)

EXPERIMENTS = ("double_well", "two_circles", "vehicle_synthetic", "marginal_transport")

DEFAULTS: Dict[str, dict] = {
    "double_well": {
        "model": {"T": 40.0, "dt": 0.01, "g": 1.0, "drift_scale": 4.0,
                  "init_mean": 0.0, "init_std": 0.5},
        "data": {"n_obs": 50},
        "observations": {"sigma_obs": 0.1},
        "chain": {"n_particles": 100, "n_iterations": 1000, "burn_in": 500, "n_chains": 1},
        "train": {"lr": 1e-4, "batch_size": 2048, "epochs": 200},
        "sample": {"n_paths": 500},
        "eval": {"against": "observations"},
    },
    "two_circles": {
        "model": {"T": 3.0, "dt": 0.01, "g_high": 5.0, "g_low": 0.01, "init_std": 1.0},
        "data": {"n_terminal": 1000, "noise": 0.05, "factor": 0.5, "mid_points": 10,
                 "mid_radius": None},
        "observations": {"mid_sigma": 0.5, "mid_h": 3, "terminal_h": 5,
                         "terminal_variance_scale": 0.01},
        "chain": {"n_particles": 1000, "n_iterations": 2000, "burn_in": 1000, "n_chains": 10},
        "train": {"lr": 1e-4, "batch_size": 1024, "epochs": 200},
        "sample": {"n_paths": 1000},
        "eval": {"against": "terminal"},
    },
    "vehicle_synthetic": {
        "model": {"dt": 0.01, "g": 0.1},
        "data": {"n_points": 1000, "every": 50, "n_sinusoids": 3, "amp_low": 0.15,
                 "amp_high": 0.3, "freq_low": 0.2, "freq_high": 0.8, "noise": 0.1},
        "observations": {"sigma_obs": 0.1},
        "chain": {"n_particles": 1000, "n_iterations": 400, "burn_in": 200, "n_chains": 1},
        "train": {"lr": 1e-4, "batch_size": 2048, "epochs": 300},
        "sample": {"n_paths": 200},
        "eval": {"against": "truth"},
    },
    "marginal_transport": {
        "model": {"T": 4.0, "dt": 0.01, "g": 1.0},
        "data": {"files": None, "times": [0.0, 1.0, 2.0, 3.0, 4.0], "dim": 5,
                 "n_per_time": 300},
        "observations": {"sigma_obs": 0.3, "h": 5},
        "chain": {"n_particles": 1000, "n_iterations": 500, "burn_in": 250, "n_chains": 8},
        "train": {"lr": 1e-4, "batch_size": 2048, "epochs": 200},
        "sample": {"n_paths": 500},
        "eval": {"against": "observations"},
    },
}

for _p in DEFAULTS.values():
    _p["chain"].setdefault("resampling", "multinomial")
    _p["train"].update({"hidden": [128, 128, 128, 128], "n_freqs": 16, "optimizer": "adam"})
    _p["eval"].setdefault("cap", 2000)
del _p

# Parameters whose defaults are not stated in the source setup; echoed in spec.json.
ASSUMED = {
    "double_well": ["observations.sigma_obs", "model.init_mean", "model.init_std"],
    "two_circles": ["data.n_terminal", "data.noise", "data.factor", "data.mid_radius",
                    "model.init_std"],
    "vehicle_synthetic": ["data.n_sinusoids", "data.amp_low", "data.amp_high", "data.freq_low",
                          "data.freq_high", "data.noise"],
    "marginal_transport": ["data.dim", "data.n_per_time"],
}


def merge(base: dict, override: Optional[dict]) -> dict:
    """Recursive dict merge; ``override`` wins."""
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def params_for(name: str, override: Optional[dict] = None) -> dict:
    if name not in DEFAULTS:
        raise ConfigurationError(f"unknown experiment {name!r}; expected one of {EXPERIMENTS}")
    return merge(DEFAULTS[name], override)


@dataclass
class SyntheticData:
    name: str
    grid: TimeGrid
    model: SdeModel
    obs: ObservationSet
    truth: Optional[Trajectory] = None
    params: dict = field(default_factory=dict)

    def __iter__(self):
        yield self.model
        yield self.obs

    @property
    def terminal_points(self) -> Optional[np.ndarray]:
        if self.obs.terminal_index is None:
            return None
        return self.obs.slots[self.obs.terminal_index].points


# -- double well -----------------------------------------------------------

def _double_well_model(p):
    m = p["model"]
    grid = make_uniform_grid(0.0, m["T"], m["dt"])
    model = SdeModel(DoubleWellDrift(m["drift_scale"]), DiffusionSchedule.constant(m["g"]), 1,
                     GaussianInit([m["init_mean"]], m["init_std"]))
    return grid, model


def _evenly_spaced_indices(n_steps, n_obs):
    if not 1 <= n_obs <= n_steps:
        raise ConfigurationError(f"cannot place {n_obs} observations on {n_steps} steps")
    return [int(round(k * n_steps / n_obs)) for k in range(1, n_obs + 1)]


def gen_double_well(seed, params: Optional[dict] = None) -> SyntheticData:
    """Ground-truth double-well path with noisy point observations at evenly spaced times."""
    p = params_for("double_well", params)
    grid, model = _double_well_model(p)
    ss = np.random.SeedSequence(seed)
    path_ss, noise_ss = ss.spawn(2)
    truth = simulate_array(model, grid, 1, path_ss)[0]
    rng = np.random.default_rng(noise_ss)
    sigma = p["observations"]["sigma_obs"]
    obs = ObservationSet()
    for j in _evenly_spaced_indices(grid.n_steps, p["data"]["n_obs"]):
        y = truth[j] + sigma * rng.standard_normal(1)
        obs.add(ObservationSlot(j, y, sigma, 1, "single"))
    return SyntheticData("double_well", grid, model, obs, Trajectory(grid, truth), p)


# -- two circles -----------------------------------------------------------

def make_two_circles(n: int, rng, noise: float = 0.05, factor: float = 0.5) -> np.ndarray:
    """Two concentric circles (radii 1 and ``factor``) with Gaussian jitter.

    Half the points (rounded down) go on the outer circle, evenly spaced in angle.
    """
    n_out = n // 2
    n_in = n - n_out
    a = np.linspace(0.0, 2.0 * np.pi, n_out, endpoint=False)
    b = np.linspace(0.0, 2.0 * np.pi, n_in, endpoint=False)
    pts = np.concatenate([np.c_[np.cos(a), np.sin(a)], factor * np.c_[np.cos(b), np.sin(b)]])
    return pts + noise * rng.standard_normal(pts.shape)


def _two_circles_model(p):
    m = p["model"]
    grid = make_uniform_grid(0.0, m["T"], m["dt"])
    T = m["T"]
    sched = DiffusionSchedule.piecewise_linear([0.0, T / 2, T], [m["g_high"], m["g_high"], m["g_low"]])
    model = SdeModel(ZeroDrift(), sched, 2, GaussianInit([0.0, 0.0], m["init_std"]))
    return grid, model


def _two_circles_slots(p, grid, mid_points, terminal_points):
    o = p["observations"]
    obs = ObservationSet()
    obs.add(ObservationSlot(grid.n_steps // 2, mid_points, o["mid_sigma"], o["mid_h"], "knn"))
    # The 0.01 factor scales the observation noise variance.
    sigma_T = o["mid_sigma"] * np.sqrt(o["terminal_variance_scale"])
    obs.add(ObservationSlot(grid.n_steps, terminal_points, sigma_T, o["terminal_h"], "knn"),
            terminal=True)
    return obs


def mid_circle_radius(p) -> float:
    r = p["data"]["mid_radius"]
    return 0.5 * (1.0 + p["data"]["factor"]) if r is None else float(r)


def gen_two_circles(n_terminal: Optional[int] = None, seed=0, params: Optional[dict] = None) -> SyntheticData:
    p = params_for("two_circles", params)
    if n_terminal is not None:
        p["data"]["n_terminal"] = int(n_terminal)
    d = p["data"]
    if d["n_terminal"] < 10:
        raise ConfigurationError("n_terminal must be at least 10")
    grid, model = _two_circles_model(p)
    rng = np.random.default_rng(seed)
    target = make_two_circles(d["n_terminal"], rng, d["noise"], d["factor"])
    ang = np.linspace(0.0, 2.0 * np.pi, d["mid_points"], endpoint=False)
    mid = mid_circle_radius(p) * np.c_[np.cos(ang), np.sin(ang)]
    obs = _two_circles_slots(p, grid, mid, target)
    return SyntheticData("two_circles", grid, model, obs, None, p)


# -- vehicle ---------------------------------------------------------------

def _vehicle_grid(p):
    n = p["data"]["n_points"]
    dt = p["model"]["dt"]
    return make_uniform_grid(0.0, (n - 1) * dt, dt)


def _vehicle_model(p):
    return SdeModel(ZeroDrift(), DiffusionSchedule.constant(p["model"]["g"]), 2,
                    PointMass([0.0, 0.0]))


def gen_vehicle_synthetic(seed=0, params: Optional[dict] = None) -> SyntheticData:
    """Smooth 2-D track from (0, 0) plus positional noise; every ``every``-th point observed."""
    p = params_for("vehicle_synthetic", params)
    d = p["data"]
    grid = _vehicle_grid(p)
    rng = np.random.default_rng(seed)
    t = grid.times
    track = np.zeros((len(t), 2))
    for c in range(2):
        for _ in range(d["n_sinusoids"]):
            a = rng.uniform(d["amp_low"], d["amp_high"])
            w = rng.uniform(d["freq_low"], d["freq_high"])
            ph = rng.uniform(0.0, 2.0 * np.pi)
            track[:, c] += a * (np.sin(w * t + ph) - np.sin(ph))
    track[1:] += d["noise"] * rng.standard_normal((len(t) - 1, 2))
    sigma = p["observations"]["sigma_obs"]
    obs = ObservationSet()
    for j in range(0, len(t), d["every"]):
        obs.add(ObservationSlot(j, track[j], sigma, 1, "single"))
    return SyntheticData("vehicle_synthetic", grid, _vehicle_model(p), obs, Trajectory(grid, track), p)


# -- marginals from CSV ----------------------------------------------------

def read_points_csv(path) -> np.ndarray:
    """Numeric CSV of points, optionally with one header row of column names."""
    rows = []
    width = None
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not v.strip() for v in rec):
                continue
            try:
                vals = [float(v) for v in rec]
            except ValueError:
                if lineno == 1 and not any(_is_number(v) for v in rec):
                    width = len(rec)
                    continue
                raise ParseError(f"non-numeric field in {rec!r}", path=path, line=lineno) from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise ParseError(f"expected {width} fields, got {len(vals)}", path=path, line=lineno)
            rows.append(vals)
    if not rows:
        raise ParseError("file contains no data rows", path=path)
    return np.array(rows, dtype=float)


def _is_number(v):
    try:
        float(v)
        return True
    except ValueError:
        return False


def load_marginals_csv(paths: Sequence, times: Sequence[float], grid: Optional[TimeGrid] = None,
                       sigma_obs: float = 0.3, h_nearest: int = 5) -> ObservationSet:
    """One KNN slot per file; the slot at the final grid time is flagged terminal."""
    if len(paths) != len(times):
        raise ConfigurationError("need one time per marginal file")
    if grid is None:
        grid = make_uniform_grid(0.0, 4.0, 0.01)
    obs = ObservationSet()
    dim = None
    for path, t in zip(paths, times):
        pts = read_points_csv(path)
        if dim is None:
            dim = pts.shape[1]
        elif pts.shape[1] != dim:
            raise ParseError(f"dimension {pts.shape[1]} differs from earlier files ({dim})", path=path)
        j = grid.index_of(float(t))
        if j in obs:
            raise ConfigurationError(f"duplicate marginal time {t} (grid index {j})")
        obs.add(ObservationSlot(j, pts, sigma_obs, min(h_nearest, len(pts)), "knn"),
                terminal=(j == grid.n_steps))
    return obs


def gen_marginal_toy(seed=0, params: Optional[dict] = None):
    """Toy stand-in for marginal data: a Gaussian cloud splitting into two drifting blobs.

    Returns ``{time: (n, dim) array}``.
    """
    p = params_for("marginal_transport", params)
    d = p["data"]
    rng = np.random.default_rng(seed)
    times = [float(t) for t in d["times"]]
    T = p["model"]["T"]
    out = {}
    for t in times:
        s = t / T
        n = d["n_per_time"]
        centers = np.zeros((2, d["dim"]))
        centers[0, 0], centers[1, 0] = 3.0 * s, -3.0 * s
        centers[:, 1] = 1.5 * s
        comp = rng.integers(2, size=n)
        out[t] = centers[comp] + (0.5 + 0.3 * s) * rng.standard_normal((n, d["dim"]))
    return out


def _marginal_model(p, obs, grid):
    first = obs.slots[obs.indices()[0]]
    init = EmpiricalInit(first.points) if first.time_index == 0 else GaussianInit(
        np.zeros(first.dim), 1.0)
    return SdeModel(ZeroDrift(), DiffusionSchedule.constant(p["model"]["g"]), first.dim, init)


# -- persistence -----------------------------------------------------------

def write_data(data: SyntheticData, out_dir, seed=None):
    """Write ``observations.csv``, ``truth.csv`` (if any) and ``spec.json``."""
    os.makedirs(out_dir, exist_ok=True)
    write_observations_csv(os.path.join(out_dir, "observations.csv"), data.obs, data.grid)
    if data.truth is not None:
        write_trajectories_csv(os.path.join(out_dir, "truth.csv"), [data.truth])
    spec = {"name": data.name, "seed": seed, "params": data.params,
            "assumed_defaults": ASSUMED.get(data.name, []),
            "slots": {str(j): {"t": float(data.grid.times[j]), "n_points": len(s.points),
                               "sigma_obs": s.sigma_obs, "h": s.h_nearest, "mode": s.mode}
                      for j, s in sorted(data.obs.slots.items())},
            "terminal_index": data.obs.terminal_index}
    with open(os.path.join(out_dir, "spec.json"), "w") as fh:
        json.dump(spec, fh, indent=2, sort_keys=True)
        fh.write("\n")


def generate(name: str, seed=0, params: Optional[dict] = None) -> SyntheticData:
    p = params_for(name, params)
    if name == "double_well":
        return gen_double_well(seed, p)
    if name == "two_circles":
        return gen_two_circles(None, seed, p)
    if name == "vehicle_synthetic":
        return gen_vehicle_synthetic(seed, p)
    grid = make_uniform_grid(0.0, p["model"]["T"], p["model"]["dt"])
    o = p["observations"]
    if p["data"].get("files"):
        obs = load_marginals_csv(p["data"]["files"], p["data"]["times"], grid, o["sigma_obs"], o["h"])
    else:
        clouds = gen_marginal_toy(seed, p)
        obs = ObservationSet()
        for t, pts in clouds.items():
            j = grid.index_of(t)
            obs.add(ObservationSlot(j, pts, o["sigma_obs"], min(o["h"], len(pts)), "knn"),
                    terminal=(j == grid.n_steps))
    return SyntheticData(name, grid, _marginal_model(p, obs, grid), obs, None, p)


def load(name: str, data_dir, params: Optional[dict] = None) -> SyntheticData:
    """Rebuild an experiment from files written by :func:`write_data`.

    Slot parameters (noise, neighbour count, mode) come from ``params``.
    """
    p = params_for(name, params)
    if name == "double_well":
        grid, model = _double_well_model(p)
    elif name == "two_circles":
        grid, model = _two_circles_model(p)
    elif name == "vehicle_synthetic":
        grid, model = _vehicle_grid(p), _vehicle_model(p)
    else:
        grid = make_uniform_grid(0.0, p["model"]["T"], p["model"]["dt"])
        model = None
    groups = read_observations_csv(os.path.join(data_dir, "observations.csv"), grid)
    if name in ("double_well", "vehicle_synthetic"):
        sigma = p["observations"]["sigma_obs"]
        obs = ObservationSet()
        for j, pts in groups.items():
            if len(pts) != 1:
                raise ParseError(f"expected one observation at grid index {j}, got {len(pts)}",
                                 path=os.path.join(data_dir, "observations.csv"))
            obs.add(ObservationSlot(j, pts, sigma, 1, "single"))
    elif name == "two_circles":
        idx = sorted(groups)
        if len(idx) != 2:
            raise ParseError("two_circles expects a midpoint and a terminal slot",
                             path=os.path.join(data_dir, "observations.csv"))
        obs = _two_circles_slots(p, grid, groups[idx[0]], groups[idx[1]])
    else:
        o = p["observations"]
        obs = ObservationSet()
        for j, pts in groups.items():
            obs.add(ObservationSlot(j, pts, o["sigma_obs"], min(o["h"], len(pts)), "knn"),
                    terminal=(j == grid.n_steps))
        model = _marginal_model(p, obs, grid)
    truth = None
    tpath = os.path.join(data_dir, "truth.csv")
    if os.path.exists(tpath):
        _, arr = read_trajectories_csv(tpath, grid)
        truth = Trajectory(grid, arr[0])
    return SyntheticData(name, grid, model, obs, truth, p)
