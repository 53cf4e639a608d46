"""Experiment runner and command-line entry point.

Config file grammar (``--config``)
----------------------------------
Plain text, one ``key = value`` per line; ``#`` starts a comment. Keys are
the long option names without dashes (``rho``, ``gamma``, ``lambda``,
``clip``, ``delay-bound``, ``filter``, ``delta-push``, ``mode``, ``seed``,
``max-epochs``, ``tolerance``, ``workers``, ``blocks``, ``block-width``, ...).
A ``[edges]`` line opens an edge section in which every line is
``worker block``; ``block-dims = 2,2,3`` then fixes block sizes. Command-line
flags override file values.

Exit codes: 0 success, 1 usage/config error, 2 divergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ConfigError, FilterSchedule, Mode, RunConfig, TopologyError, build_topology
from .metrics import (TheoremParams, augmented_lagrangian, check_theorem1, check_theorem2,
                      kkt_residuals, t_epsilon)
from .problems import LibsvmFormatError, load_libsvm, make_problem
from .server import save_checkpoint
from .synthetic import convex_fixture, generate_synthetic, lasso_fixture, logistic_fixture
from .transport import run

SUMMARY_SCHEMA = "blockadmm-summary v1"
EPS_TABLE = (1e-1, 1e-2, 1e-3)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3

FIXTURES = {"convex": convex_fixture, "lasso": lasso_fixture, "logistic": logistic_fixture}


class ConfigFileError(ConfigError):
    pass


@dataclass
class ExperimentSpec:
    config: RunConfig
    out: Path
    data: Path | None = None
    fixture: str | None = None
    synthetic: dict = field(default_factory=dict)
    repetitions: int = 1
    edges: list | None = None
    block_dims: list | None = None
    threads: int | None = None

    def __post_init__(self):
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")


def parse_config_file(path) -> tuple:
    """Return ``(options, edges)`` from a config file; see the module docstring."""
    options, edges = {}, None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.lower() == "[edges]":
                edges = []
                continue
            if edges is not None and "=" not in line:
                parts = line.split()
                if len(parts) != 2:
                    raise ConfigFileError(f"{path}:{lineno}: edge line needs 'worker block'")
                try:
                    edges.append((int(parts[0]), int(parts[1])))
                except ValueError:
                    raise ConfigFileError(f"{path}:{lineno}: non-integer edge {line!r}") from None
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigFileError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key = key.strip().replace("_", "-")
            if not key:
                raise ConfigFileError(f"{path}:{lineno}: empty key")
            options[key] = (value.strip(), lineno)
    return options, edges


def build_parser() -> argparse.ArgumentParser:
    class Parser(argparse.ArgumentParser):
        def error(self, message):
            self.print_usage(sys.stderr)
            self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")

    p = Parser(prog="blockadmm", description="Block-wise asynchronous ADMM runner")
    sub = p.add_subparsers(dest="command")
    r = sub.add_parser("run", help="run an experiment")
    r.add_argument("--config", type=Path)
    r.add_argument("--mode", choices=[m.value for m in Mode])
    r.add_argument("--workers", type=int)
    r.add_argument("--blocks", type=int)
    r.add_argument("--block-width", type=int)
    r.add_argument("--rho", type=float)
    r.add_argument("--gamma", type=float)
    r.add_argument("--lambda", dest="lam", type=float)
    r.add_argument("--clip", type=float)
    r.add_argument("--delay-bound", type=int)
    r.add_argument("--filter")
    r.add_argument("--delta-push", action="store_true", default=None)
    r.add_argument("--seed", type=int)
    r.add_argument("--max-epochs", type=int)
    r.add_argument("--tolerance", type=float)
    r.add_argument("--data", type=Path)
    r.add_argument("--fixture", choices=sorted(FIXTURES))
    r.add_argument("--loss", choices=["least-squares", "logistic"])
    r.add_argument("--samples-per-worker", type=int)
    r.add_argument("--density", type=float)
    r.add_argument("--noise", type=float)
    r.add_argument("--block-order", choices=["random", "cyclic"])
    r.add_argument("--metric-every", type=int)
    r.add_argument("--mu-rule", choices=["damped", "plain"])
    r.add_argument("--repetitions", type=int)
    r.add_argument("--threads", type=int)
    r.add_argument("--kill-staleness", type=int)
    r.add_argument("--out", type=Path)
    c = sub.add_parser("compare", help="compare two run directories")
    c.add_argument("run_a", type=Path)
    c.add_argument("run_b", type=Path)
    return p


_DEFAULTS = {
    "mode": "async-sim", "workers": 4, "blocks": 4, "block-width": 5, "rho": 100.0,
    "gamma": 0.01, "lambda": 1e-3, "clip": 1e4, "delay-bound": 0, "filter": "off",
    "delta-push": False, "seed": 0, "max-epochs": 100, "tolerance": 1e-3,
    "loss": None, "samples-per-worker": 50, "density": 0.3, "noise": 0.1,
    "block-order": "random", "metric-every": 100, "mu-rule": "damped",
    "repetitions": 1, "out": "runs/latest",
}

_CONVERT = {
    "workers": int, "blocks": int, "block-width": int, "rho": float, "gamma": float,
    "lambda": float, "clip": float, "delay-bound": int, "seed": int, "max-epochs": int,
    "tolerance": float, "samples-per-worker": int, "density": float, "noise": float,
    "metric-every": int, "repetitions": int, "threads": int, "kill-staleness": int,
    "delta-push": lambda v: str(v).lower() in ("1", "true", "yes", "on"),
}


def spec_from_args(args) -> ExperimentSpec:
    opts = dict(_DEFAULTS)
    edges = None
    if args.config is not None:
        if not args.config.exists():
            raise FileNotFoundError(f"config file not found: {args.config}")
        file_opts, edges = parse_config_file(args.config)
        for key, (value, lineno) in file_opts.items():
            if key not in _DEFAULTS and key not in _CONVERT and key not in (
                    "data", "fixture", "block-dims", "threads", "kill-staleness"):
                raise ConfigFileError(f"{args.config}:{lineno}: unknown key {key!r}")
            try:
                opts[key] = _CONVERT.get(key, str)(value)
            except ValueError:
                raise ConfigFileError(
                    f"{args.config}:{lineno}: bad value {value!r} for {key}") from None
    for key, value in vars(args).items():
        if value is None or key in ("config", "command"):
            continue
        opts["lambda" if key == "lam" else key.replace("_", "-")] = value
    mode = Mode(opts["mode"])
    config = RunConfig(
        rho=opts["rho"], gamma=opts["gamma"], lam=opts["lambda"], clip=opts["clip"],
        delay_bound=opts["delay-bound"],
        filter_schedule=FilterSchedule.parse(str(opts["filter"])),
        delta_push=bool(opts["delta-push"]), mode=mode, seed=opts["seed"],
        max_epochs=opts["max-epochs"], tolerance=opts["tolerance"],
        block_order=opts["block-order"], metric_every=opts["metric-every"],
        mu_rule=opts["mu-rule"], kill_staleness=opts.get("kill-staleness"))
    block_dims = None
    if "block-dims" in opts:
        block_dims = [int(v) for v in str(opts["block-dims"]).split(",")]
    synthetic = {k: opts[k] for k in ("workers", "blocks", "block-width", "loss",
                                      "samples-per-worker", "density", "noise")}
    return ExperimentSpec(
        config=config, out=Path(opts["out"]),
        data=Path(opts["data"]) if opts.get("data") else None,
        fixture=opts.get("fixture"), synthetic=synthetic,
        repetitions=opts["repetitions"], edges=edges, block_dims=block_dims,
        threads=opts.get("threads"))


def build_problem(spec: ExperimentSpec):
    cfg = spec.config
    syn = spec.synthetic
    if spec.fixture:
        return FIXTURES[spec.fixture]()
    if spec.data is not None:
        if not spec.data.exists():
            raise FileNotFoundError(f"dataset not found: {spec.data}")
        top, datasets, block_map = load_libsvm(spec.data, syn["workers"], syn["block-width"])
        return make_problem(syn["loss"] or "logistic", datasets, top, cfg.lam, cfg.clip,
                            block_map)
    edges = spec.edges
    if edges is not None:
        dims = spec.block_dims or [syn["block-width"]] * (1 + max(j for _, j in edges))
        if len(set(dims)) != 1:
            raise ConfigError("synthetic data needs equal block dims")
        top = build_topology(edges, dims)
        inst = generate_synthetic(top.num_workers, top.num_blocks, dims[0],
                                  syn["samples-per-worker"], syn["density"], syn["noise"],
                                  seed=cfg.seed, kind=syn["loss"] or "least-squares",
                                  edges=top.edges)
    else:
        inst = generate_synthetic(syn["workers"], syn["blocks"], syn["block-width"],
                                  syn["samples-per-worker"], syn["density"], syn["noise"],
                                  seed=cfg.seed, kind=syn["loss"] or "least-squares")
    return inst.problem(cfg.lam, cfg.clip)


def _hexlist(a):
    return [float(v).hex() for v in np.asarray(a).ravel()]


def snapshot_record(snap) -> dict:
    return {
        "epoch": snap.epoch,
        "consistency": snap.consistency,
        "x": {f"{i},{j}": _hexlist(v) for (i, j), v in sorted(snap.x.items())},
        "y": {f"{i},{j}": _hexlist(v) for (i, j), v in sorted(snap.y.items())},
        "z": {str(j): _hexlist(v) for j, v in sorted(snap.z.items())},
    }


def _finite_or_none(v):
    return v if v is not None and math.isfinite(v) else None


def summarize(problem, config, traj, seed) -> dict:
    params = TheoremParams.from_problem(problem, config)
    first = traj.samples[0].snapshot
    L0 = augmented_lagrangian(first, problem, config)
    summary = {
        "schema": SUMMARY_SCHEMA,
        "mode": config.mode.value,
        "seed": seed,
        "diverged": traj.diverged,
        "theorem1": check_theorem1(params, L0).to_dict(),
        "counts": dict(traj.counts),
        "filtered_fraction": traj.filtered_fraction,
    }
    if config.filter_schedule.kind != "off":
        summary["theorem2"] = check_theorem2(params, config.filter_schedule, L0).to_dict()
    good = traj.last_good()
    if good is not None:
        r1, r2, r3 = kkt_residuals(good.snapshot, problem)
        summary.update({
            "final_epoch": good.epoch,
            "final_objective": _finite_or_none(good.objective),
            "final_P": _finite_or_none(good.P),
            "kkt": {"r1": r1, "r2": r2, "r3": r3},
        })
    eps_list = sorted(set(EPS_TABLE + (config.tolerance,)), reverse=True)
    table = {}
    for eps in eps_list:
        k = t_epsilon(traj.P, eps)
        table[repr(eps)] = None if k is None else traj.samples[k].epoch
    summary["t_epsilon"] = table
    return summary


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_zpath(path, traj):
    with open(path, "w") as fh:
        fh.write("# blockadmm-zpath v1\n")
        for s in traj.samples:
            z = np.concatenate([s.snapshot.z[j] for j in sorted(s.snapshot.z)])
            fh.write(",".join([str(s.event_index)] + [repr(float(v)) for v in z]) + "\n")


def run_experiment(spec: ExperimentSpec, problem=None) -> int:
    """Run every repetition and write artifacts; returns the process exit code."""
    if problem is None:
        problem = build_problem(spec)
    spec.out.mkdir(parents=True, exist_ok=True)
    runs, timing, status = [], {}, EXIT_OK
    for rep in range(spec.repetitions):
        seed = spec.config.seed + rep
        config = spec.config.replace(seed=seed)
        kw = {"num_threads": spec.threads} if config.mode is Mode.ASYNC_THREADS else {}
        with np.errstate(over="ignore", invalid="ignore"):
            traj = run(problem, config, **kw)
        tag = f"seed{seed}"
        traj.write_csv(spec.out / f"trajectory-{tag}.csv")
        _write_zpath(spec.out / f"zpath-{tag}.csv", traj)
        save_checkpoint(traj.servers, spec.out / f"checkpoint-{tag}.jsonl")
        summary = summarize(problem, config, traj, seed)
        _write_json(spec.out / f"conditions-{tag}.json",
                    {k: summary[k] for k in ("theorem1", "theorem2") if k in summary})
        if traj.diverged:
            status = EXIT_DIVERGED
            good = traj.last_good()
            if good is not None:
                _write_json(spec.out / f"last-good-{tag}.json", snapshot_record(good.snapshot))
        runs.append(summary)
        timing[tag] = {"wall_seconds": traj.wall_seconds, **traj.timing}
    head = dict(runs[0])
    head["runs"] = runs
    _write_json(spec.out / "summary.json", head)
    _write_json(spec.out / "timing.json", timing)
    return status


def _load_summary(run_dir: Path) -> dict:
    path = Path(run_dir) / "summary.json"
    with open(path) as fh:
        data = json.load(fh)
    if data.get("schema") != SUMMARY_SCHEMA:
        raise ValueError(f"{path}: schema {data.get('schema')!r} != {SUMMARY_SCHEMA!r}")
    return data


def _read_zpath(path: Path):
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                continue
            rows.append([float(v) for v in line.strip().split(",")[1:]])
    return np.array(rows)


def compare_runs(run_a, run_b) -> dict:
    a, b = _load_summary(run_a), _load_summary(run_b)

    def delta(key):
        if a.get(key) is None or b.get(key) is None:
            return None
        return b[key] - a[key]

    report = {
        "delta_final_objective": delta("final_objective"),
        "delta_final_P": delta("final_P"),
        "relative_objective_delta": None,
        "delta_t_epsilon": {},
        "messages": {
            "a": {"total": a["counts"]["pushes"] + a["counts"]["filtered"],
                  "sent": a["counts"]["pushes"], "filtered": a["counts"]["filtered"],
                  "filtered_fraction": a["filtered_fraction"]},
            "b": {"total": b["counts"]["pushes"] + b["counts"]["filtered"],
                  "sent": b["counts"]["pushes"], "filtered": b["counts"]["filtered"],
                  "filtered_fraction": b["filtered_fraction"]},
        },
        "z_max_deviation": None,
    }
    if a.get("final_objective") not in (None, 0):
        report["relative_objective_delta"] = abs(report["delta_final_objective"]) / abs(
            a["final_objective"])
    for eps, ta in a["t_epsilon"].items():
        tb = b["t_epsilon"].get(eps)
        report["delta_t_epsilon"][eps] = None if ta is None or tb is None else tb - ta
    za = Path(run_a) / f"zpath-seed{a['seed']}.csv"
    zb = Path(run_b) / f"zpath-seed{b['seed']}.csv"
    if za.exists() and zb.exists():
        pa, pb = _read_zpath(za), _read_zpath(zb)
        if pa.shape == pb.shape:
            report["z_max_deviation"] = float(np.max(np.abs(pa - pb))) if pa.size else 0.0
    return report


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "compare":
            print(json.dumps(compare_runs(args.run_a, args.run_b), indent=2, sort_keys=True))
            return EXIT_OK
        spec = spec_from_args(args)
        status = run_experiment(spec)
    except (ConfigError, TopologyError, LibsvmFormatError, ValueError) as exc:
        print(f"blockadmm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"blockadmm: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    summary = _load_summary(spec.out)
    print(json.dumps({k: summary.get(k) for k in
                      ("mode", "final_objective", "final_P", "kkt", "t_epsilon", "diverged")},
                     indent=2, sort_keys=True))
    return status


if __name__ == "__main__":
    sys.exit(main())
