"""Command-line entry point: ``dsl {sim,pseudo,run,apply}``.

Every flag may also come from a JSON file passed with ``--config``; flags
given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import build_time_grid, kaplan_meier, read_csv, write_csv
from .harness import (APPLICATION_HIDDEN, ExperimentConfig, ReplicateError, default_threads,
                      estimate_cate_real, export_results, load_profiles, run_experiment,
                      write_pseudo_csv, write_replicates_csv, write_trajectories_csv)
from .network import TrainConfig
from .pseudo import cross_fit_pseudo_outcomes
from .simulate import generate, params_for, true_cate


def _hidden(text: str) -> tuple:
    return tuple(int(v) for v in str(text).split(",") if v)


def _add_train_flags(p, hidden_default):
    defaults = TrainConfig()
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--lr", type=float, default=defaults.learning_rate)
    p.add_argument("--hidden", type=_hidden, default=hidden_default, help="comma-separated hidden widths")
    p.add_argument("--magnitude-bound", type=float, default=defaults.magnitude_bound,
                   help="parameter clamp applied after every optimiser step (<=0 disables)")


def _train_config(args) -> TrainConfig:
    bound = args.magnitude_bound
    return TrainConfig(learning_rate=args.lr, epochs=args.epochs, batch_size=args.batch_size,
                       hidden=args.hidden, magnitude_bound=bound if bound and bound > 0 else None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dsl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dsl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON file with default values for any flag")
        return p

    p = add("sim", "simulate one dataset to CSV")
    p.add_argument("--case", choices=["1", "2", "3", "appendix"], default="1")
    p.add_argument("--n", type=int, default=None, help="sample size (default: the case's training size)")
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--oracle", type=Path, help="also write the true effect of every row on the grid")
    p.add_argument("--grid-j", type=int, default=1)

    p = add("pseudo", "cross-fitted pseudo-outcomes for a CSV dataset")
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--grid-j", type=int, default=1)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = add("run", "simulation experiment over replicates")
    p.add_argument("--case", choices=["1", "2", "3", "appendix"], default="1")
    p.add_argument("--j", type=int, default=1)
    p.add_argument("--replicates", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=400)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--nuisance", default="fitted",
                   choices=["fitted", "oracle", "wrong-s", "wrong-e", "wrong-g"])
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: DSL_THREADS or all cores)")
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p, TrainConfig().hidden)

    p = add("apply", "effect trajectories on a real dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--j", type=int, default=10)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profiles", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p, APPLICATION_HIDDEN)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        blob = json.loads(args.config.read_text())
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(k.replace("-", "_") for k in blob) - known
        if unknown:
            parser.error(f"unknown keys in {args.config}: {sorted(unknown)}")
        sub.set_defaults(**{k.replace("-", "_"): v for k, v in blob.items()})
        args = parser.parse_args(argv)
        if isinstance(getattr(args, "hidden", None), list):
            args.hidden = tuple(int(v) for v in args.hidden)
    return args


def _cmd_sim(args) -> int:
    n = args.n if args.n is not None else (2000 if args.case == "appendix" else 800)
    params = params_for(args.case, n, args.d)
    sim = generate(params, args.seed)
    write_csv(sim.dataset, args.out)
    if args.oracle:
        grid = build_time_grid(sim.dataset, args.grid_j)
        tau = true_cate(params, sim.dataset.x, grid.times)
        with args.oracle.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index"] + [f"true_cate@{t!r}" for t in grid.times.tolist()])
            writer.writerows([[i] + [repr(float(v)) for v in row] for i, row in enumerate(tau)])
    print(f"wrote {sim.dataset.n} records to {args.out} (event fraction {sim.dataset.delta.mean():.3f})")
    return 0


def _cmd_pseudo(args) -> int:
    data = read_csv(args.inp).to_dataset()
    grid = build_time_grid(data, args.grid_j)
    phi = cross_fit_pseudo_outcomes(data, grid, args.k, seed=args.seed)
    write_pseudo_csv(phi, args.out)
    print(f"wrote {phi.values.shape[0]}x{phi.values.shape[1]} pseudo-outcomes to {args.out}")
    return 0


def _run_log(args, extra) -> dict:
    return {"version": __version__, "command": sys.argv, "python": platform.python_version(),
            "numpy": np.__version__, "arguments": {k: (str(v) if isinstance(v, Path) else v)
                                                   for k, v in vars(args).items()}, **extra}


def _cmd_run(args) -> int:
    config = ExperimentConfig(case=args.case, n_train=args.n_train, n_test=args.n_test, d=args.d, j=args.j,
                              k=args.k, replicates=args.replicates, master_seed=args.seed,
                              nuisance_spec=args.nuisance, train_config=_train_config(args))
    args.out.mkdir(parents=True, exist_ok=True)
    threads = args.threads or default_threads()
    start = time.perf_counter()
    log = {"config": config.to_dict(), "threads": threads}

    def progress(m):
        print(f"replicate {m.replicate_index}: bias {m.bias:+.4f} mse {m.mse:.4f}", flush=True)

    try:
        summary = run_experiment(config, threads=threads, partial_path=args.out / "replicates.csv",
                                 progress=progress)
    except ReplicateError as exc:
        log.update(status="failed", error=str(exc), finished=len(exc.partial),
                   seconds=time.perf_counter() - start)
        (args.out / "run_log.json").write_text(json.dumps(_run_log(args, log), indent=2))
        print(f"error: {exc}", file=sys.stderr)
        return 1
    export_results(summary, args.out / "summary.json", "json")
    write_replicates_csv(summary.replicates, args.out / "replicates.csv")
    log.update(status="ok", seconds=time.perf_counter() - start)
    (args.out / "run_log.json").write_text(json.dumps(_run_log(args, log), indent=2))
    print(f"mean bias {summary.mean_bias:+.4f} ({summary.bias_ci[0]:+.4f}, {summary.bias_ci[1]:+.4f}); "
          f"mean mse {summary.mean_mse:.4f} ({summary.mse_ci[0]:.4f}, {summary.mse_ci[1]:.4f})")
    return 0


def _cmd_apply(args) -> int:
    table = read_csv(args.data)
    profiles = load_profiles(args.profiles, table.covariate_names)
    traj = estimate_cate_real(table, args.j, args.k, _train_config(args), profiles, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    write_trajectories_csv(traj, args.out / "trajectories.csv")
    dataset = table.to_dataset()
    with (args.out / "kaplan_meier.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "t", "survival"])
        for arm in (0, 1):
            km = kaplan_meier(dataset, arm)
            for t, s in zip(km.knots, km.values):
                writer.writerow([arm, repr(float(t)), repr(float(s))])
    log = {"grid": traj.grid.times.tolist(), **traj.provenance, "profiles": [asdict(p) | {"values": list(p.values)}
                                                                             for p in profiles]}
    (args.out / "run_log.json").write_text(json.dumps(_run_log(args, log), indent=2, default=str))
    print(f"wrote {len(traj)} trajectory rows to {args.out / 'trajectories.csv'}")
    return 0


COMMANDS = {"sim": _cmd_sim, "pseudo": _cmd_pseudo, "run": _cmd_run, "apply": _cmd_apply}


def main(argv=None) -> int:
    args = parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
