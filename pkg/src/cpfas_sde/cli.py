"""Config-driven experiment runner.

Subcommands::

    cpfas-sde run CONFIG.json
    cpfas-sde eval RUN_DIR --against {observations,truth,terminal}
    cpfas-sde gen EXPERIMENT --seed N [--out DIR]

A config is a JSON document::

    {"experiment": "double_well", "seed": 0,
     "stages": ["generate", "smooth", "train", "sample", "eval"],
     "io": {"out_dir": "runs/dw"}, "workers": 4, "progress_every": 50,
     "model": {...}, "chain": {...}, "train": {...}, ...}

Sections other than the top-level keys override ``datasets.DEFAULTS``.
Every stage writes into ``<out_dir>/<stage>/v<k>/``; a rerun creates the next
version instead of touching earlier output.  Exit codes: 0 success,
2 invalid input, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import re
import sys
import time
from typing import Dict, List, Optional

import numpy as np

from . import datasets
from .datasets import DEFAULTS, EXPERIMENTS
from .drift_net import DriftNet, TrainOptions, load_checkpoint, sample_learned, save_checkpoint, train
from .errors import ConfigurationError, CpfasError, ParseError
from .metrics import emd_report, linear_interpolation, mean_trajectory, path_mse, trajectory_mse
from .observations import ObservationSet
from .smoother import ChainConfig, read_chain, run_chains_parallel, write_chain
from .timegrid import Trajectory, read_trajectories_csv, simulate_array, write_trajectories_csv

log = logging.getLogger("cpfas_sde")

STAGES = ("generate", "smooth", "train", "sample", "eval")
TARGETS = ("observations", "truth", "terminal")
OUT_ROOT_ENV = "CPFAS_SDE_OUT"
TOP_LEVEL = {"experiment", "seed", "stages", "io", "workers", "progress_every"}

# What each stage reads from an earlier stage.
REQUIRES = {"smooth": "generate", "train": "smooth", "sample": "train"}


class ValidationError(ConfigurationError):
    """Bad config or missing prerequisite; reported with exit status 2."""


class StageError(CpfasError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# -- config ------------------------------------------------------------------

def _line_of(text: str, key: str) -> int:
    """First line mentioning ``"key"``; 1 if absent."""
    pat = re.compile(r'"' + re.escape(key) + r'"\s*:')
    for n, line in enumerate(text.splitlines(), start=1):
        if pat.search(line):
            return n
    return 1


def _fail(path, text, key, msg):
    raise ValidationError(f"{path}:{_line_of(text, key) if text else 1}: {msg}")


def _check_types(path, text, section, given, default):
    for key, val in given.items():
        if key not in default:
            _fail(path, text, key, f"unknown key '{section}.{key}'")
        ref = default[key]
        if ref is None or val is None:
            continue
        if isinstance(ref, bool) != isinstance(val, bool):
            _fail(path, text, key, f"'{section}.{key}' must be a boolean")
        if isinstance(ref, (int, float)) and not isinstance(ref, bool):
            if not isinstance(val, (int, float)) or isinstance(val, bool):
                _fail(path, text, key, f"'{section}.{key}' must be a number")
            if isinstance(ref, int) and not isinstance(ref, bool) and isinstance(val, float) \
                    and not val.is_integer():
                _fail(path, text, key, f"'{section}.{key}' must be an integer")
        elif isinstance(ref, str) and not isinstance(val, str):
            _fail(path, text, key, f"'{section}.{key}' must be a string")
        elif isinstance(ref, list) and not isinstance(val, list):
            _fail(path, text, key, f"'{section}.{key}' must be a list")


def load_config(path) -> dict:
    """Parse and validate a config file; returns the resolved config."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}:{exc.lineno}: {exc.msg}") from None
    return resolve_config(raw, path, text)


def resolve_config(raw: dict, path="<config>", text: str = "") -> dict:
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}:1: config must be a JSON object")
    name = raw.get("experiment")
    if name not in EXPERIMENTS:
        _fail(path, text, "experiment", f"'experiment' must be one of {', '.join(EXPERIMENTS)}")
    defaults = DEFAULTS[name]
    for key, val in raw.items():
        if key in TOP_LEVEL:
            continue
        if key not in defaults:
            _fail(path, text, key, f"unknown section '{key}'")
        if not isinstance(val, dict):
            _fail(path, text, key, f"section '{key}' must be an object")
        _check_types(path, text, key, val, defaults[key])
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        _fail(path, text, "seed", "'seed' must be a nonnegative integer")
    stages = raw.get("stages", list(STAGES))
    if not isinstance(stages, list) or not stages or any(s not in STAGES for s in stages):
        _fail(path, text, "stages", f"'stages' must be a non-empty subset of {', '.join(STAGES)}")
    if len(set(stages)) != len(stages):
        _fail(path, text, "stages", "'stages' lists a stage twice")
    stages = [s for s in STAGES if s in stages]
    workers = raw.get("workers")
    if workers is not None and (not isinstance(workers, int) or workers < 1):
        _fail(path, text, "workers", "'workers' must be a positive integer")
    io = raw.get("io", {})
    if not isinstance(io, dict) or set(io) - {"out_dir"}:
        _fail(path, text, "io", "'io' accepts only 'out_dir'")
    out_dir = io.get("out_dir") or os.path.join(os.environ.get(OUT_ROOT_ENV, "runs"), name)
    if path != "<config>" and not os.path.isabs(out_dir) and "out_dir" in io:
        out_dir = os.path.join(os.path.dirname(os.path.abspath(path)), out_dir)
    params = datasets.merge(defaults, {k: v for k, v in raw.items() if k not in TOP_LEVEL})
    cfg = {"experiment": name, "seed": seed, "stages": stages, "out_dir": out_dir,
           "workers": workers or os.cpu_count() or 1,
           "progress_every": int(raw.get("progress_every", 0)), "params": params}
    for section, check in (("chain", chain_config), ("train", train_options)):
        try:
            check(cfg)
        except ConfigurationError as exc:
            _fail(path, text, section, str(exc))
    if params["eval"]["against"] not in TARGETS:
        _fail(path, text, "against", f"'eval.against' must be one of {', '.join(TARGETS)}")
    return cfg


def _canon(v):
    # 1 and 1.0 are the same setting.
    if isinstance(v, dict):
        return {k: _canon(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_canon(x) for x in v]
    if isinstance(v, float) and v.is_integer():
        return int(v)
    return v


def config_hash(cfg: dict) -> str:
    """Hash of the fields that affect results (experiment, seed, resolved parameters)."""
    blob = json.dumps(_canon({"experiment": cfg["experiment"], "seed": cfg["seed"],
                              "params": cfg["params"]}), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _derived_seed(seed: int, stage: str, k: int = 0) -> int:
    return int(np.random.SeedSequence([seed, STAGES.index(stage), k]).generate_state(1)[0])


def chain_config(cfg) -> ChainConfig:
    c = cfg["params"]["chain"]
    return ChainConfig(int(c["n_particles"]), int(c["n_iterations"]), int(c["burn_in"]),
                       int(c["n_chains"]), cfg["seed"], c["resampling"])


def train_options(cfg) -> TrainOptions:
    t = cfg["params"]["train"]
    opts = TrainOptions(lr=float(t["lr"]), batch_size=int(t["batch_size"]), epochs=int(t["epochs"]),
                        seed=_derived_seed(cfg["seed"], "train"), optimizer=t["optimizer"])
    if opts.batch_size < 1 or opts.epochs < 0 or not opts.lr > 0:
        raise ConfigurationError("train: need batch_size >= 1, epochs >= 0, lr > 0")
    if opts.optimizer not in ("adam", "sgd"):
        raise ConfigurationError(f"train: unknown optimizer {opts.optimizer!r}")
    return opts


# -- artifacts ---------------------------------------------------------------

def git_blob_hash(path) -> str:
    """SHA-1 of ``b"blob <size>\\0" + content``, as git computes object ids."""
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def hash_tree(directory) -> Dict[str, str]:
    out = {}
    for root, _, files in os.walk(directory):
        for f in sorted(files):
            p = os.path.join(root, f)
            out[os.path.relpath(p, directory)] = git_blob_hash(p)
    return dict(sorted(out.items()))


def latest_version(out_dir, stage) -> Optional[str]:
    base = os.path.join(out_dir, stage)
    if not os.path.isdir(base):
        return None
    vs = [int(m.group(1)) for d in os.listdir(base) if (m := re.fullmatch(r"v(\d+)", d))]
    return os.path.join(base, f"v{max(vs)}") if vs else None


def new_version(out_dir, stage) -> str:
    cur = latest_version(out_dir, stage)
    k = 1 if cur is None else int(os.path.basename(cur)[1:]) + 1
    path = os.path.join(out_dir, stage, f"v{k}")
    os.makedirs(path)
    return path


def _stage_complete(stage, d) -> bool:
    marker = {"generate": "observations.csv", "smooth": "chain_0.csv", "train": "model.ckpt",
              "sample": "samples.csv"}.get(stage)
    return d is not None and (marker is None or os.path.exists(os.path.join(d, marker)))


def check_dependencies(cfg):
    """Every requested stage needs its input either from this run or from disk."""
    planned = set(cfg["stages"])

    def available(stage):
        return stage in planned or _stage_complete(stage, latest_version(cfg["out_dir"], stage))

    for stage in cfg["stages"]:
        if stage == "eval":
            if not available("generate"):
                raise ValidationError(f"stage 'eval' needs 'generate' output under {cfg['out_dir']}")
            if not (available("smooth") or available("sample")):
                raise ValidationError(f"stage 'eval' needs smoother or sample output under "
                                      f"{cfg['out_dir']}")
            continue
        need = REQUIRES.get(stage)
        if need and not available(need):
            what = "a checkpoint" if need == "train" else f"'{need}' output"
            raise ValidationError(f"stage '{stage}' needs {what} under {cfg['out_dir']}; "
                                  f"add '{need}' to stages")
        if stage in ("train", "sample") and not available("generate"):
            raise ValidationError(f"stage '{stage}' needs 'generate' output under {cfg['out_dir']}")


# -- stages ------------------------------------------------------------------

def _load_data(cfg):
    d = latest_version(cfg["out_dir"], "generate")
    return datasets.load(cfg["experiment"], d, cfg["params"])


def stage_generate(cfg, out):
    data = datasets.generate(cfg["experiment"], cfg["seed"], cfg["params"])
    datasets.write_data(data, out, seed=cfg["seed"])
    return {"slots": len(data.obs)}


def stage_smooth(cfg, out):
    data = _load_data(cfg)
    ccfg = chain_config(cfg)
    refs = run_chains_parallel(data.model, data.obs, data.grid, ccfg,
                               workers=cfg["workers"], progress_every=cfg["progress_every"])
    kept = ccfg.n_iterations - ccfg.burn_in
    for k in range(ccfg.n_chains):
        write_chain(out, k, refs[k * kept:(k + 1) * kept], ccfg)
    return {"n_chains": ccfg.n_chains, "kept_per_chain": kept}


def _read_pool(cfg, grid):
    d = latest_version(cfg["out_dir"], "smooth")
    n = len([f for f in os.listdir(d) if re.fullmatch(r"chain_\d+\.csv", f)])
    return [r for k in range(n) for r in read_chain(d, k, grid)]


def stage_train(cfg, out):
    data = _load_data(cfg)
    pool = _read_pool(cfg, data.grid)
    t = cfg["params"]["train"]
    opts = train_options(cfg)
    net = DriftNet.create(data.model.dim, data.grid.T, float(data.grid.deltas[0]),
                          tuple(t["hidden"]), int(t["n_freqs"]), seed=_derived_seed(cfg["seed"], "train", 1))
    every = max(1, cfg["progress_every"])

    def log_fn(epoch, value):
        if cfg["progress_every"] and (epoch + 1) % every == 0:
            log.info("train: epoch %d/%d loss %.6g", epoch + 1, opts.epochs, value)

    res = train(net, pool, opts, log_fn=log_fn)
    save_checkpoint(os.path.join(out, "model.ckpt"), res.net, res.manifest())
    with open(os.path.join(out, "losses.json"), "w") as fh:
        json.dump({"initial": res.initial_loss, "final": res.final_loss,
                   "epochs": res.epoch_losses}, fh, indent=2)
        fh.write("\n")
    return res.manifest()


def stage_sample(cfg, out):
    data = _load_data(cfg)
    net, _ = load_checkpoint(os.path.join(latest_version(cfg["out_dir"], "train"), "model.ckpt"))
    n = int(cfg["params"]["sample"]["n_paths"])
    paths = sample_learned(net, data.model.diffusion, data.grid, data.model.init_sampler, n,
                           _derived_seed(cfg["seed"], "sample"))
    write_trajectories_csv(os.path.join(out, "samples.csv"), paths)
    return {"n_paths": n}


def stage_eval(cfg, out, against=None):
    report = evaluate(cfg, against or cfg["params"]["eval"]["against"])
    with open(os.path.join(out, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(format_report(report))
    return {"against": report["against"]}


STAGE_FN = {"generate": stage_generate, "smooth": stage_smooth, "train": stage_train,
            "sample": stage_sample, "eval": stage_eval}


# -- evaluation --------------------------------------------------------------

def _collect(cfg, grid):
    """Smoother pool and learned samples as ``(n, T+1, d)`` arrays (either may be None)."""
    pools = {}
    if _stage_complete("smooth", latest_version(cfg["out_dir"], "smooth")):
        pools["smoother"] = np.stack([r.states.states for r in _read_pool(cfg, grid)])
    s = latest_version(cfg["out_dir"], "sample")
    if _stage_complete("sample", s):
        pools["learned"] = read_trajectories_csv(os.path.join(s, "samples.csv"), grid)[1]
    return pools


def evaluate(cfg, against: str) -> dict:
    if against not in TARGETS:
        raise ValidationError(f"--against must be one of {', '.join(TARGETS)}")
    data = _load_data(cfg)
    grid, obs = data.grid, data.obs
    pools = _collect(cfg, grid)
    if not pools:
        raise ValidationError(f"{cfg['out_dir']}: no smoother or sample output to evaluate")
    cap = int(cfg["params"]["eval"]["cap"])
    rows = []
    if against == "truth":
        if data.truth is None:
            raise ValidationError(f"experiment '{cfg['experiment']}' has no ground-truth path")
        for name, arr in pools.items():
            mean = mean_trajectory([Trajectory(grid, p) for p in arr])
            rows.append({"metric": "mse", "source": name, "time": None,
                         "value": path_mse(mean, data.truth)})
        if all(s.mode == "single" for s in obs.slots.values()):
            lin = linear_interpolation(obs, grid.times)
            rows.append({"metric": "mse", "source": "linear_interpolation", "time": None,
                         "value": path_mse(lin, data.truth)})
    elif against == "terminal":
        j = obs.terminal_index
        if j is None:
            raise ValidationError(f"experiment '{cfg['experiment']}' has no terminal slot")
        target = obs.slots[j].points
        prior = simulate_array(data.model, grid, min(len(target), cap),
                               _derived_seed(cfg["seed"], "eval"))[:, -1]
        sources = dict(pools, prior=prior[:, None, :].repeat(len(grid), axis=1))
        for name, arr in sources.items():
            r = emd_report(obs.project(arr[:, j]), target, "emd", float(grid.times[j]), cap,
                           seed=cfg["seed"])
            rows.append(dict(r, source=name))
    else:
        for name, arr in pools.items():
            mean = mean_trajectory([Trajectory(grid, p) for p in arr])
            single = [j for j in obs.indices() if obs.slots[j].mode == "single"]
            if single:
                sub = ObservationSet({j: obs.slots[j] for j in single}, obs.obs_matrix)
                rows.append({"metric": "mse", "source": name, "time": None,
                             "value": trajectory_mse(mean, sub)})
            for j in obs.indices():
                if obs.slots[j].mode == "knn":
                    r = emd_report(obs.project(arr[:, j]), obs.slots[j].points, "emd",
                                   float(grid.times[j]), cap, seed=cfg["seed"])
                    rows.append(dict(r, source=name))
    return {"experiment": cfg["experiment"], "against": against, "rows": rows}


def format_report(report) -> str:
    lines = [f"{'source':<22}{'metric':<8}{'time':>10}{'value':>16}"]
    for r in report["rows"]:
        t = "-" if r["time"] is None else f"{r['time']:.4g}"
        lines.append(f"{r['source']:<22}{r['metric']:<8}{t:>10}{r['value']:>16.6g}")
    return "\n".join(lines)


# -- commands ----------------------------------------------------------------

def cmd_run(config_path) -> int:
    try:
        cfg = load_config(config_path)
        check_dependencies(cfg)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return execute(cfg, config_path)


def execute(cfg, config_path=None) -> int:
    out_dir = cfg["out_dir"]
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved.json"), "w") as fh:
        json.dump({k: cfg[k] for k in ("experiment", "seed", "params")}, fh, indent=2,
                  sort_keys=True)
        fh.write("\n")
    manifest = {"config_hash": config_hash(cfg), "experiment": cfg["experiment"],
                "seed": cfg["seed"], "stages": [], "inputs": {}}
    if config_path is not None:
        manifest["inputs"][os.path.abspath(config_path)] = git_blob_hash(config_path)
    for f in cfg["params"].get("data", {}).get("files") or []:
        if os.path.exists(f):
            manifest["inputs"][os.path.abspath(f)] = git_blob_hash(f)
    status = 0
    for stage in cfg["stages"]:
        out = new_version(out_dir, stage)
        t0 = time.perf_counter()
        try:
            info = STAGE_FN[stage](cfg, out)
        except (ConfigurationError, ParseError) as exc:
            print(f"error: stage '{stage}': {exc}", file=sys.stderr)
            status = 2
        except Exception as exc:  # noqa: BLE001 - any failure is reported with its stage
            print(f"error: {StageError(stage, exc)}", file=sys.stderr)
            status = 1
        wall = time.perf_counter() - t0
        entry = {"stage": stage, "dir": os.path.relpath(out, out_dir), "wall_seconds": wall,
                 "outputs": hash_tree(out)}
        if status:
            entry["failed"] = True
        else:
            entry["info"] = info
        manifest["stages"].append(entry)
        log.info("stage %s done in %.1fs", stage, wall)
        if status:
            break
    _write_manifest(out_dir, manifest)
    return status


def _write_manifest(out_dir, manifest):
    base = os.path.join(out_dir, "manifests")
    os.makedirs(base, exist_ok=True)
    k = len([f for f in os.listdir(base) if f.startswith("run_")]) + 1
    path = os.path.join(base, f"run_{k:04d}.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _run_dir_config(run_dir) -> dict:
    path = os.path.join(run_dir, "config.resolved.json")
    if not os.path.exists(path):
        raise ValidationError(f"{run_dir}: not a run directory (config.resolved.json missing)")
    with open(path) as fh:
        raw = json.load(fh)
    return {"experiment": raw["experiment"], "seed": raw["seed"], "params": raw["params"],
            "out_dir": run_dir, "stages": ["eval"], "workers": 1, "progress_every": 0}


def cmd_eval(run_dir, against) -> int:
    try:
        cfg = _run_dir_config(run_dir)
        if latest_version(run_dir, "generate") is None:
            raise ValidationError(f"{run_dir}: no generated data")
        out = new_version(run_dir, "eval")
        stage_eval(cfg, out, against)
    except (ConfigurationError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CpfasError as exc:
        print(f"error: {StageError('eval', exc)}", file=sys.stderr)
        return 1
    return 0


def cmd_gen(experiment, seed, out=None) -> int:
    try:
        if experiment not in EXPERIMENTS:
            raise ValidationError(f"unknown experiment '{experiment}'; expected one of "
                                  f"{', '.join(EXPERIMENTS)}")
        out = out or os.path.join(os.environ.get(OUT_ROOT_ENV, "data"), experiment)
        data = datasets.generate(experiment, seed)
        datasets.write_data(data, out, seed=seed)
    except (ConfigurationError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cpfas-sde", description=__doc__.splitlines()[0])
    p.add_argument("-q", "--quiet", action="store_true", help="suppress progress output")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the stages listed in a config file")
    r.add_argument("config")
    e = sub.add_parser("eval", help="evaluate an existing run directory")
    e.add_argument("run_dir")
    e.add_argument("--against", choices=TARGETS, required=True)
    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("experiment", choices=EXPERIMENTS)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None, help=f"output directory (default ${OUT_ROOT_ENV}/<name> "
                                               "or data/<name>)")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if not args.quiet and not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    if args.command == "run":
        return cmd_run(args.config)
    if args.command == "eval":
        return cmd_eval(args.run_dir, args.against)
    return cmd_gen(args.experiment, args.seed, args.out)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
