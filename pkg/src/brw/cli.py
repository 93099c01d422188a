"""Experiment configuration, task orchestration and result emission.

Configs are JSON with a fixed schema (unknown keys rejected). Every run
writes CSV tables plus JSON-lines mirrors and a manifest that echoes the
effective config; re-running from that echo reproduces the table files
bit-identically. Exit codes: 0 success, 1 config/validation error,
2 numerical failure (step control, population cap).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._ode import StepControlError
from .feynman_kac import ParabolicProblem, solve_direct, solve_fk_mc
from .hierarchy import integrate_orders
from .kernel import KernelSpec, TorusGrid, validate_kernel
from .lyapunov import (EnvelopeBounds, PerturbationEnvelope, draw_admissible,
                       m1_envelope, solve_pair_system, spatial_from_fields)
from .model import (BranchingLaw, InitialCondition, ModelError, ModelParams,
                    classify_criticality)
from .moments import (first_moment_curve, m2_steady_state_fourier,
                      m2_steady_state_series, m2_transient)
from .simulator import ReplicaExplosion, estimate_moment, run_ensemble
from ._ode import integrate_affine
from .kernel import generator_matrix

TASKS = ("simulate", "moments", "steady-state", "hierarchy", "fk",
         "lyapunov-m1", "lyapunov-m2", "validate")

MOMENTS_HEADER = "t,stat,offset,mc_mean,mc_se,analytic,abs_diff"
LYAPUNOV_HEADER = "draw,t,site,value,lower,upper,margin,pass"


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "task": None,
    "model": {
        "kernel": {"entries": None, "kappa": None},
        "mu": None, "b": None, "k": None,
        "init": {"type": None, "value": None},
    },
    "grid": {"sides": None},
    "run": {"horizon": None, "snapshots": None, "replicas": None,
            "master_seed": None, "force_equal_seeds": None,
            "population_cap": None},
    "moments": {"times": None, "offsets": None},
    "hierarchy": {"order": None, "times": None},
    "fk": {"t": None, "x": None, "paths": None, "seed": None, "scale": None,
           "potential": None, "source": None, "u0": None},
    "lyapunov": {
        "envelope": {"v0": None, "k0": None, "u0": None, "u0_pair": None,
                     "epsilon": None},
        "horizon": None, "trials": None, "seed": None,
        "diffusion_scale": None, "m1_scale": None, "n_times": None,
        "b": None,
    },
    "tolerances": {"series_tol": None, "ode_tol": None, "violation_tol": None},
}


def _check_keys(section, schema, path="config"):
    if schema is None or not isinstance(section, dict):
        return
    for key, value in section.items():
        if key not in schema:
            raise ConfigError(f"unknown key {path}.{key} "
                              f"(known: {', '.join(sorted(schema))})")
        _check_keys(value, schema[key], f"{path}.{key}")


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            config = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigError("config root must be an object")
    _check_keys(config, _SCHEMA)
    for name, value in config.get("tolerances", {}).items():
        if not (isinstance(value, (int, float)) and value > 0):
            raise ConfigError(f"tolerances.{name} must be positive, got {value!r}")
    return config


def build_model(config: dict) -> ModelParams:
    try:
        model = config["model"]
        kernel_cfg = model["kernel"]
        kernel = KernelSpec.from_pairs(
            [(tuple(off), w) for off, w in kernel_cfg["entries"]],
            kappa=kernel_cfg["kappa"])
        law = BranchingLaw(mu=model["mu"],
                           b={int(n): float(r) for n, r in model.get("b", {}).items()})
        init_cfg = model.get("init", {"type": "const", "value": 1})
        init = InitialCondition(kind=init_cfg.get("type", "const"),
                                value=init_cfg.get("value", 1))
        return ModelParams(kernel=kernel, law=law, k=model.get("k", 0.0), init=init)
    except KeyError as exc:
        raise ConfigError(f"missing model key: {exc}") from exc
    except (ModelError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def build_grid(config: dict) -> TorusGrid:
    try:
        return TorusGrid(tuple(config["grid"]["sides"]))
    except KeyError as exc:
        raise ConfigError(f"missing grid key: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


class Emitter:
    """Writes a CSV table and its JSON-lines mirror with identical values."""

    def __init__(self, out_dir: Path, seed: int, cfg_hash: str):
        self.out_dir = out_dir
        self.seed = seed
        self.cfg_hash = cfg_hash
        self.written: list[str] = []

    def table(self, name: str, header: str, rows) -> None:
        columns = header.split(",")
        stamp = f"# master_seed={self.seed} config_hash={self.cfg_hash}\n"
        csv_path = self.out_dir / f"{name}.csv"
        with open(csv_path, "w") as fh:
            fh.write(stamp)
            fh.write(header + "\n")
            for row in rows:
                fh.write(",".join(_fmt(v) for v in row) + "\n")
        jsonl_path = self.out_dir / f"{name}.jsonl"
        with open(jsonl_path, "w") as fh:
            fh.write(json.dumps({"master_seed": self.seed,
                                 "config_hash": self.cfg_hash}) + "\n")
            for row in rows:
                fh.write(json.dumps(dict(zip(columns, row))) + "\n")
        self.written += [csv_path.name, jsonl_path.name]


def _offset_tuple(offset, dimension: int):
    if np.isscalar(offset):
        if dimension != 1:
            raise ConfigError(f"scalar offset {offset} needs a 1-d grid")
        return (int(offset),)
    return tuple(int(c) for c in offset)


def _task_validate(config, params, grid, emit):
    kernel_report = validate_kernel(params.kernel)
    lines = [f"kernel {'pass' if kernel_report.ok else 'fail'}"]
    lines += [f"  {v}" for v in kernel_report.violations]
    lines.append("law pass")
    lines.append(classify_criticality(params.law))
    rows = [(item,) for item in lines]
    emit.table("validate", "check", rows)
    print(", ".join(line for line in lines if not line.startswith(" ")))
    return 0 if kernel_report.ok else 1


def _analytic_m2(params, grid, t, offset):
    return m2_transient(params, grid, t).at_offset(offset)


def _task_simulate(config, params, grid, emit, seed, replicas):
    run_cfg = config.get("run", {})
    horizon = run_cfg.get("horizon", 10.0)
    snapshots = run_cfg.get("snapshots", [horizon])
    n_rep = replicas if replicas is not None else run_cfg.get("replicas", 100)
    cap = run_cfg.get("population_cap", 1_000_000)
    forced = [seed] * n_rep if run_cfg.get("force_equal_seeds") else None
    ensemble = run_ensemble(params, grid, horizon, snapshots, n_rep, seed,
                            cap=cap, replica_seeds=forced)
    offsets = config.get("moments", {}).get("offsets", [0, 1, 2])
    curve = first_moment_curve(params)
    subcritical = params.criticality == "subcritical"
    rows = []
    for t in ensemble.times:
        est = estimate_moment(ensemble, t, 1)
        analytic = curve(t)
        rows.append((float(t), "m1", "", est.value, est.se, analytic,
                     abs(est.value - analytic)))
        for off in offsets:
            off_t = _offset_tuple(off, grid.dimension)
            est = estimate_moment(ensemble, t, 2, (off_t,))
            analytic = _analytic_m2(params, grid, t, off_t) if subcritical else ""
            diff = abs(est.value - analytic) if subcritical else ""
            label = ";".join(str(c) for c in off_t)
            rows.append((float(t), "m2", label, est.value, est.se, analytic, diff))
    emit.table("moments", MOMENTS_HEADER, rows)
    return 0


def _task_moments(config, params, grid, emit):
    times = config.get("moments", {}).get("times", [1.0, 5.0, 10.0])
    offsets = config.get("moments", {}).get("offsets", [0, 1, 2])
    curve = first_moment_curve(params)
    rows = []
    for t in times:
        rows.append((float(t), "m1", "", "", "", curve(t), ""))
        field = m2_transient(params, grid, t)
        for off in offsets:
            off_t = _offset_tuple(off, grid.dimension)
            label = ";".join(str(c) for c in off_t)
            rows.append((float(t), "m2", label, "", "", field.at_offset(off_t), ""))
    emit.table("moments", MOMENTS_HEADER, rows)
    return 0


def _task_steady_state(config, params, grid, emit):
    tol = config.get("tolerances", {}).get("series_tol", 1e-12)
    series = m2_steady_state_series(params, grid, tol=tol)
    fourier = m2_steady_state_fourier(params, grid)
    coord_cols = "u" if grid.dimension == 1 else ",".join(
        f"u{i+1}" for i in range(grid.dimension))
    header = f"{coord_cols},m2_series,m2_fourier,abs_diff"
    rows = []
    for idx in range(grid.n_sites):
        coords = grid.coords_of(idx)
        signed = tuple(c if c <= L // 2 else c - L for c, L in zip(coords, grid.sides))
        rows.append(tuple(signed) + (series[idx], fourier[idx],
                                     abs(series[idx] - fourier[idx])))
    emit.table("m2_steady", header, rows)
    return 0


def _task_hierarchy(config, params, grid, emit):
    h_cfg = config.get("hierarchy", {})
    order = h_cfg.get("order", 2)
    times = h_cfg.get("times", [1.0, 5.0])
    tol = config.get("tolerances", {}).get("ode_tol", 1e-8)
    frames = integrate_orders(order, params, grid, times, tol=tol)
    rows = []
    for frame, t in zip(frames, times):
        for n, tensor in sorted(frame.items()):
            flat = tensor.values.ravel()
            for idx in range(flat.size):
                sites = np.unravel_index(idx, tensor.values.shape)
                label = "|".join(str(int(s)) for s in sites)
                rows.append((float(t), n, label, float(flat[idx])))
    emit.table("hierarchy", "t,order,sites,value", rows)
    return 0


def _field_from_config(value, grid, default):
    S = grid.n_sites
    if value is None:
        return np.full(S, float(default))
    if np.isscalar(value):
        return np.full(S, float(value))
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != (S,):
        raise ConfigError(f"per-site field needs {S} entries, got {arr.shape}")
    return arr


def _task_fk(config, params, grid, emit, seed):
    fk_cfg = config.get("fk", {})
    t = fk_cfg.get("t", 5.0)
    x = fk_cfg.get("x", 0)
    paths = fk_cfg.get("paths", 10_000)
    problem = ParabolicProblem(
        kernel=params.kernel, grid=grid,
        potential=_field_from_config(fk_cfg.get("potential"), grid, 1.0),
        source=_field_from_config(fk_cfg.get("source"), grid, 0.0),
        u0=_field_from_config(fk_cfg.get("u0"), grid, 1.0),
        generator_scale=fk_cfg.get("scale"))
    direct = solve_direct(problem, t)
    estimate = solve_fk_mc(problem, t, x, paths, seed=fk_cfg.get("seed", seed))
    rows = []
    for site in range(grid.n_sites):
        if site == x:
            rows.append((site, direct[site], estimate.mean, estimate.se,
                         abs(direct[site] - estimate.mean)))
        else:
            rows.append((site, direct[site], "", "", ""))
    emit.table("fk", "site,u_direct,u_mc,u_mc_se,abs_diff", rows)
    return 0


def _lyapunov_common(config, seed):
    ly = config.get("lyapunov", {})
    env_cfg = ly.get("envelope", {})
    env = PerturbationEnvelope(
        v0=env_cfg.get("v0", 1.0), k0=env_cfg.get("k0", 1.0),
        u0=env_cfg.get("u0", 1.0), u0_pair=env_cfg.get("u0_pair", 1.0),
        epsilon=env_cfg.get("epsilon", 0.05))
    return ly, env, ly.get("horizon", 10.0), ly.get("trials", 10), ly.get("seed", seed)


def _task_lyapunov_m1(config, params, grid, emit, seed):
    ly, env, horizon, trials, ly_seed = _lyapunov_common(config, seed)
    scale = ly.get("m1_scale", 1.0)
    n_times = ly.get("n_times", 21)
    tol = config.get("tolerances", {}).get("violation_tol", 1e-8)
    rng = np.random.default_rng(ly_seed)
    times = np.linspace(0.0, horizon, n_times)
    lower, upper = m1_envelope(env, env.u0, times)
    G = generator_matrix(params.kernel, grid)
    rows = []
    failures = 0
    for trial in range(trials):
        draw = draw_admissible(env, grid, rng)
        A = scale * G - np.diag(draw.v)
        traj = integrate_affine(A, draw.k, draw.u0, times, tol=1e-10)
        for ti, t in enumerate(times):
            for x in range(grid.n_sites):
                value = float(traj[ti, x])
                margin = float(min(value - lower[ti], upper[ti] - value))
                ok = margin >= -tol
                failures += 0 if ok else 1
                rows.append((trial, float(t), x, value, float(lower[ti]),
                             float(upper[ti]), margin, bool(ok)))
    emit.table("lyapunov", LYAPUNOV_HEADER, rows)
    return 0 if failures == 0 else 2


def _task_lyapunov_m2(config, params, grid, emit, seed):
    ly, env, horizon, trials, ly_seed = _lyapunov_common(config, seed)
    base_law = params.law
    bounds = EnvelopeBounds(env, params.kernel.kappa)
    n_times = ly.get("n_times", 17)
    tol = config.get("tolerances", {}).get("violation_tol", 1e-8)
    rng = np.random.default_rng(ly_seed)
    times = np.linspace(0.0, horizon, n_times)
    A_curve = bounds.m2_lower(times)
    B_curve = bounds.m2_upper(times)
    centre = (env.k0 / env.v0) ** 2
    rows = []
    failures = 0
    S = grid.n_sites
    for trial in range(trials):
        draw = draw_admissible(env, grid, rng)
        spatial = spatial_from_fields(params.kernel, grid, draw.v, draw.k, base_law)
        sol = solve_pair_system(spatial, draw.u0, draw.u0_pair, times,
                                ly.get("diffusion_scale", 1.0),
                                ly.get("m1_scale", 1.0))
        centered = sol.m2 - sol.L - centre
        for ti, t in enumerate(times):
            for x in range(S):
                for y in range(S):
                    value = float(centered[ti, x, y])
                    margin = float(min(value - A_curve[ti], B_curve[ti] - value))
                    ok = margin >= -tol
                    failures += 0 if ok else 1
                    rows.append((trial, float(t), f"{x}|{y}", value,
                                 float(A_curve[ti]), float(B_curve[ti]),
                                 margin, bool(ok)))
    emit.table("lyapunov", LYAPUNOV_HEADER, rows)
    return 0 if failures == 0 else 2


def run(config_path, out_dir, seed: int | None = None,
        replicas: int | None = None, task: str | None = None) -> int:
    """Execute one task; returns the process exit code."""
    started = time.time()
    try:
        config = load_config(config_path)
        task = task or config.get("task")
        if task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
        config["task"] = task
        if seed is not None:
            config.setdefault("run", {})["master_seed"] = int(seed)
        if replicas is not None:
            config.setdefault("run", {})["replicas"] = int(replicas)
        master_seed = config.get("run", {}).get("master_seed", 0)
        params = build_model(config)
        grid = build_grid(config)
        report = validate_kernel(params.kernel)
        if task != "validate" and not report.ok:
            raise ConfigError("invalid kernel: " + "; ".join(report.violations))
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    emit = Emitter(out, master_seed, config_hash(config))
    try:
        if task == "validate":
            code = _task_validate(config, params, grid, emit)
        elif task == "simulate":
            code = _task_simulate(config, params, grid, emit, master_seed, replicas)
        elif task == "moments":
            code = _task_moments(config, params, grid, emit)
        elif task == "steady-state":
            code = _task_steady_state(config, params, grid, emit)
        elif task == "hierarchy":
            code = _task_hierarchy(config, params, grid, emit)
        elif task == "fk":
            code = _task_fk(config, params, grid, emit, master_seed)
        elif task == "lyapunov-m1":
            code = _task_lyapunov_m1(config, params, grid, emit, master_seed)
        else:
            code = _task_lyapunov_m2(config, params, grid, emit, master_seed)
    except (ConfigError, ModelError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (StepControlError, ReplicaExplosion) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2

    manifest = {
        "config": config,
        "master_seed": master_seed,
        "config_hash": emit.cfg_hash,
        "version": __version__,
        "wall_time_s": round(time.time() - started, 3),
        "outputs": emit.written,
    }
    with open(Path(out_dir) / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="brw",
        description="Branching random walk with immigration: simulation and analytics")
    parser.add_argument("task", choices=TASKS)
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--replicas", type=int, default=None,
                        help="replica count override")
    args = parser.parse_args(argv)
    return run(args.config, args.out, seed=args.seed, replicas=args.replicas,
               task=args.task)


if __name__ == "__main__":
    sys.exit(main())
