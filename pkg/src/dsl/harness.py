"""Replicate runner, Monte Carlo summaries, result export, and the real-data workflow."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .data import CsvTable, TimeGrid, build_time_grid, read_csv
from .network import TrainConfig, forward, train
from .nuisance import EPS_CLIP, oracle_nuisance, reference_median_u
from .pseudo import PseudoOutcomeMatrix, cross_fit_pseudo_outcomes
from .simulate import child_seeds, derive_seed, generate, params_for, true_cate

CASES = ("1", "2", "3", "appendix")
NUISANCE_SPECS = ("fitted", "oracle", "wrong_S", "wrong_e", "wrong_G")
APPLICATION_HIDDEN = (64, 32, 16)
REPLICATE_COLUMNS = ("replicate", "bias", "mse", "final_loss", "nonconverged", "logistic_ridge",
                     "cap_breaches", "seconds")
TRAJECTORY_COLUMNS = ("profile", "covariate_value", "t", "cate")

# (n_train, d) when the config leaves them unset
_CASE_DEFAULTS = {"1": (800, 30), "2": (800, 30), "3": (800, 30), "appendix": (2000, 10)}


class ReplicateError(RuntimeError):
    """A replicate failed; ``partial`` holds the metrics of replicates that finished."""

    def __init__(self, message, replicate: int, partial: Sequence["ReplicateMetrics"] = ()):
        super().__init__(message)
        self.replicate = replicate
        self.partial = tuple(partial)


def _normalise_nuisance(spec: str) -> str:
    aliases = {"wrong-s": "wrong_S", "wrong-e": "wrong_e", "wrong-g": "wrong_G"}
    spec = aliases.get(spec.lower() if spec.startswith("wrong") else spec, spec)
    if spec not in NUISANCE_SPECS:
        raise ValueError(f"unknown nuisance specification {spec!r}")
    return spec


@dataclass(frozen=True)
class ExperimentConfig:
    """One simulation experiment. ``n_train`` and ``d`` default per case."""

    case: str = "1"
    n_train: Optional[int] = None
    n_test: int = 400
    d: Optional[int] = None
    j: int = 1
    k: int = 5
    replicates: int = 50
    master_seed: int = 0
    nuisance_spec: str = "fitted"
    train_config: TrainConfig = TrainConfig()
    eps_clip: float = EPS_CLIP
    cate_method: str = "gl"

    def __post_init__(self):
        case = str(self.case)
        if case not in CASES:
            raise ValueError(f"case must be one of {CASES}, got {self.case!r}")
        object.__setattr__(self, "case", case)
        n_default, d_default = _CASE_DEFAULTS[case]
        if self.n_train is None:
            object.__setattr__(self, "n_train", n_default)
        if self.d is None:
            object.__setattr__(self, "d", d_default)
        object.__setattr__(self, "nuisance_spec", _normalise_nuisance(self.nuisance_spec))
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.n_test < 1 or self.n_train < 2:
            raise ValueError("n_test must be >= 1 and n_train >= 2")
        if self.j < 1 or self.k < 2:
            raise ValueError("j must be >= 1 and k >= 2")
        if isinstance(self.train_config, dict):
            object.__setattr__(self, "train_config", TrainConfig(**self.train_config))

    @property
    def params(self):
        return params_for(self.case, self.n_train, self.d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["train_config"]["hidden"] = list(self.train_config.hidden)
        return out

    @classmethod
    def from_dict(cls, blob: dict) -> "ExperimentConfig":
        blob = dict(blob)
        if "train_config" in blob:
            blob["train_config"] = TrainConfig(**blob["train_config"])
        return cls(**blob)


@dataclass(frozen=True)
class ReplicateMetrics:
    replicate_index: int
    bias: float
    mse: float
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.mse >= 0:
            raise ValueError("mse must be nonnegative")


def mc_ci(values, level: float = 0.95) -> tuple[float, float]:
    """Normal-theory Monte Carlo interval ``mean +- z sd / sqrt(R)``.

    A single value gives the degenerate interval at that value.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("mc_ci needs at least one value")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    mean = float(v.mean())
    if v.size == 1:
        return mean, mean
    z = 1.959964 if level == 0.95 else float(stats.norm.ppf(0.5 + level / 2))
    half = z * float(v.std(ddof=1)) / math.sqrt(v.size)
    return mean - half, mean + half


@dataclass(frozen=True)
class ExperimentSummary:
    mean_bias: float
    bias_ci: tuple
    mean_mse: float
    mse_ci: tuple
    replicates: tuple
    config: dict = field(default_factory=dict)

    @classmethod
    def from_replicates(cls, metrics: Sequence[ReplicateMetrics], config: dict | None = None):
        metrics = tuple(sorted(metrics, key=lambda m: m.replicate_index))
        bias = [m.bias for m in metrics]
        mse = [m.mse for m in metrics]
        return cls(float(np.mean(bias)), mc_ci(bias), float(np.mean(mse)), mc_ci(mse), metrics,
                   config or {})

    def to_dict(self) -> dict:
        return {
            "mean_bias": self.mean_bias,
            "bias_ci": list(self.bias_ci),
            "mean_mse": self.mean_mse,
            "mse_ci": list(self.mse_ci),
            "replicates": [{"replicate": m.replicate_index, "bias": m.bias, "mse": m.mse,
                            "diagnostics": m.diagnostics} for m in self.replicates],
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, blob: dict) -> "ExperimentSummary":
        reps = tuple(ReplicateMetrics(r["replicate"], r["bias"], r["mse"], r.get("diagnostics", {}))
                     for r in blob["replicates"])
        return cls(blob["mean_bias"], tuple(blob["bias_ci"]), blob["mean_mse"], tuple(blob["mse_ci"]),
                   reps, blob.get("config", {}))

    def __eq__(self, other):
        if not isinstance(other, ExperimentSummary):
            return NotImplemented
        return self.to_dict() == other.to_dict()


# --- replicate runner ---------------------------------------------------------

@lru_cache(maxsize=16)
def _median_u(case: str, n: int, d: int) -> float:
    return reference_median_u(params_for(case, n, d))


def _nuisance_spec(config: ExperimentConfig, params):
    spec = config.nuisance_spec
    if spec == "fitted":
        return "fitted"
    misspec = None if spec == "oracle" else spec
    median = _median_u(config.case, config.n_train, config.d) if misspec in ("wrong_S", "wrong_G") else None
    return oracle_nuisance(params, misspec, median_u=median, eps_clip=config.eps_clip)


def replicate_inputs(config: ExperimentConfig, r: int):
    """Training data, test covariates, time grid, pseudo-outcomes and the test-set truth for replicate ``r``."""
    params = config.params
    train_seed, test_seed, fold_seed, net_seed = child_seeds(derive_seed(config.master_seed, r), 4)
    sim = generate(params, train_seed)
    test = generate(params.with_n(config.n_test), test_seed)
    grid = build_time_grid(sim.dataset, config.j)
    fold_int = int(fold_seed.generate_state(1)[0])
    phi = cross_fit_pseudo_outcomes(sim.dataset, grid, config.k, seed=fold_int,
                                    nuisance_spec=_nuisance_spec(config, params), eps_clip=config.eps_clip)
    truth = true_cate(params, test.dataset.x, grid.times, method=config.cate_method)
    return sim, test.dataset.x, grid, phi, truth, int(net_seed.generate_state(1)[0])


def run_replicate(config: ExperimentConfig, r: int,
                  cate_fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None) -> ReplicateMetrics:
    """Simulate, cross-fit, train and score one replicate.

    ``cate_fn(x, times)`` replaces the trained network when given (a test hook).
    """
    start = time.perf_counter()
    try:
        sim, x_test, grid, phi, truth, net_seed = replicate_inputs(config, r)
        if cate_fn is None:
            net = train(sim.dataset.x, phi, replace(config.train_config, seed=net_seed))
            estimate = forward(net, x_test)
            final_loss = net.loss_history[-1] if net.loss_history else float("nan")
        else:
            estimate = np.asarray(cate_fn(x_test, grid.times), dtype=float)
            final_loss = float("nan")
    except Exception as exc:
        raise ReplicateError(f"replicate {r}: {type(exc).__name__}: {exc}", r) from exc
    err = estimate - truth
    diag = {
        "final_loss": float(final_loss),
        "nonconverged": int(sum(len(p.diagnostics.get("nonconverged", ())) for p in phi.provenance)),
        "logistic_ridge": int(sum(bool(p.diagnostics.get("logistic_ridge", False)) for p in phi.provenance)),
        "cap_breaches": int(sim.cap_breaches),
        "grid": [float(t) for t in grid.times],
        "seconds": time.perf_counter() - start,
    }
    return ReplicateMetrics(r, float(err.mean()), float(np.mean(err ** 2)), diag)


def default_threads() -> int:
    env = os.environ.get("DSL_THREADS")
    if env:
        threads = int(env)
        if threads < 1:
            raise ValueError("DSL_THREADS must be a positive integer")
        return threads
    return os.cpu_count() or 1


def run_experiment(config: ExperimentConfig, threads: Optional[int] = None,
                   partial_path=None, progress: Optional[Callable[[ReplicateMetrics], None]] = None
                   ) -> ExperimentSummary:
    """Run every replicate and summarise.

    Replicates may run in worker processes, but results are reduced in
    replicate order, so the summary does not depend on ``threads``. If a
    replicate fails, the finished ones are written to ``partial_path`` (CSV)
    and the :class:`ReplicateError` carries them.
    """
    threads = default_threads() if threads is None else threads
    indices = range(config.replicates)
    done: dict[int, ReplicateMetrics] = {}
    try:
        if threads <= 1 or config.replicates == 1:
            for r in indices:
                done[r] = run_replicate(config, r)
                if progress:
                    progress(done[r])
        else:
            with ProcessPoolExecutor(max_workers=min(threads, config.replicates)) as pool:
                futures = [pool.submit(run_replicate, config, r) for r in indices]
                for r, fut in enumerate(futures):
                    done[r] = fut.result()
                    if progress:
                        progress(done[r])
    except ReplicateError as exc:
        finished = [done[r] for r in sorted(done)]
        if partial_path is not None:
            write_replicates_csv(finished, partial_path)
        raise ReplicateError(str(exc), exc.replicate, finished) from exc
    return ExperimentSummary.from_replicates([done[r] for r in indices], config.to_dict())


# --- real-data mode -------------------------------------------------------------

@dataclass(frozen=True)
class ProfileQuery:
    """Vary one covariate over ``values`` with the others held at ``fixed_profile``."""

    varying_covariate: int
    values: tuple
    fixed_profile: Optional[np.ndarray] = None
    name: str = ""

    def matrix(self, fixed: np.ndarray) -> np.ndarray:
        base = np.asarray(fixed if self.fixed_profile is None else self.fixed_profile, dtype=float)
        x = np.tile(base, (len(self.values), 1))
        x[:, self.varying_covariate] = self.values
        return x


def reference_profile(x: np.ndarray, max_levels: int = 10) -> np.ndarray:
    """Per-column mode for integer-valued columns with few levels, mean otherwise."""
    x = np.asarray(x, dtype=float)
    out = x.mean(axis=0)
    for col in range(x.shape[1]):
        levels, counts = np.unique(x[:, col], return_counts=True)
        if levels.size <= max_levels and np.all(levels == np.round(levels)):
            out[col] = levels[np.argmax(counts)]
    return out


def load_profiles(path, covariate_names: Sequence[str]) -> list[ProfileQuery]:
    """Profiles from JSON: a list of ``{"covariate": name-or-index, "values": [...], "name": ..., "fixed": {...}}``.

    ``fixed`` overrides individual entries of the reference profile.
    """
    blob = json.loads(Path(path).read_text())
    if isinstance(blob, dict):
        blob = blob.get("profiles", [])
    names = list(covariate_names)
    out = []
    for i, item in enumerate(blob):
        col = item["covariate"]
        col = names.index(col) if isinstance(col, str) else int(col)
        fixed = None
        if item.get("fixed"):
            fixed = {names.index(k) if isinstance(k, str) else int(k): float(v) for k, v in item["fixed"].items()}
        out.append(ProfileQuery(col, tuple(float(v) for v in item["values"]), fixed,
                                str(item.get("name", f"{names[col]}#{i}"))))
    return out


@dataclass(frozen=True)
class Trajectories:
    rows: tuple  # (profile, covariate_value, t, cate)
    grid: TimeGrid
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.rows)


def estimate_cate_real(data, grid_spec=10, k: int = 5, train_config: Optional[TrainConfig] = None,
                       profiles: Sequence[ProfileQuery] = (), seed: int = 0,
                       eps_clip: float = EPS_CLIP) -> Trajectories:
    """Fit the full pipeline on all subjects and evaluate effect trajectories at each profile.

    ``data`` is a CSV path or a parsed :class:`CsvTable`. ``grid_spec`` is the
    grid size J or an explicit increasing vector of times inside the observed
    follow-up range. Profiles carrying a dict ``fixed_profile`` override the
    reference (mean or modal) profile at those entries only.
    """
    table = data if isinstance(data, CsvTable) else read_csv(data)
    dataset = table.to_dataset()
    if np.ndim(grid_spec) == 0:
        grid = build_time_grid(dataset, int(grid_spec))
    else:
        grid = TimeGrid(np.asarray(grid_spec, dtype=float))
        if grid.t_min < dataset.u.min() or grid.t_max > dataset.u.max():
            raise ValueError("time grid lies outside the observed follow-up range")
    if train_config is None:
        train_config = TrainConfig(hidden=APPLICATION_HIDDEN)
    fold_seed, net_seed = child_seeds(seed, 2)
    phi = cross_fit_pseudo_outcomes(dataset, grid, k, seed=int(fold_seed.generate_state(1)[0]),
                                    eps_clip=eps_clip)
    net = train(dataset.x, phi, replace(train_config, seed=int(net_seed.generate_state(1)[0])))
    reference = reference_profile(dataset.x)
    lo, hi = dataset.x.min(axis=0), dataset.x.max(axis=0)
    rows = []
    for q, prof in enumerate(profiles):
        fixed = reference.copy()
        if isinstance(prof.fixed_profile, dict):
            for col, val in prof.fixed_profile.items():
                fixed[col] = val
            prof = replace(prof, fixed_profile=fixed)
        col = prof.varying_covariate
        if not 0 <= col < dataset.d:
            raise ValueError(f"profile {q}: covariate index {col} out of range")
        vals = np.asarray(prof.values, dtype=float)
        if np.any(vals < lo[col]) or np.any(vals > hi[col]):
            raise ValueError(f"profile {q}: probe values outside the observed range of covariate {col}")
        est = forward(net, prof.matrix(fixed))
        label = prof.name or f"profile{q}"
        for i, v in enumerate(vals):
            for jj, t in enumerate(grid.times):
                rows.append((label, float(v), float(t), float(est[i, jj])))
    return Trajectories(tuple(rows), grid, {"n": dataset.n, "d": dataset.d,
                                            "covariate_names": list(table.covariate_names),
                                            "final_loss": net.loss_history[-1] if net.loss_history else None})


# --- export ----------------------------------------------------------------------

def summary_schema() -> dict:
    return json.loads(resources.files("dsl").joinpath("schemas/summary.schema.json").read_text())


def _fmt(v) -> str:
    return repr(float(v))


def write_replicates_csv(metrics: Sequence[ReplicateMetrics], path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPLICATE_COLUMNS)
        for m in metrics:
            d = m.diagnostics
            writer.writerow([m.replicate_index, _fmt(m.bias), _fmt(m.mse), _fmt(d.get("final_loss", math.nan)),
                             d.get("nonconverged", 0), d.get("logistic_ridge", 0), d.get("cap_breaches", 0),
                             _fmt(d.get("seconds", math.nan))])


def read_replicates_csv(path) -> list[ReplicateMetrics]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != REPLICATE_COLUMNS:
            raise ValueError(f"{path}: unexpected replicate columns {reader.fieldnames}")
        return [ReplicateMetrics(int(row["replicate"]), float(row["bias"]), float(row["mse"]),
                                 {"final_loss": float(row["final_loss"]), "nonconverged": int(row["nonconverged"]),
                                  "logistic_ridge": int(row["logistic_ridge"]),
                                  "cap_breaches": int(row["cap_breaches"]), "seconds": float(row["seconds"])})
                for row in reader]


def write_pseudo_csv(matrix: PseudoOutcomeMatrix, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"t={_fmt(t)}" for t in matrix.grid.times])
        for row in matrix.values:
            writer.writerow([_fmt(v) for v in row])


def read_pseudo_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(times, values)``."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not all(h.startswith("t=") for h in header):
            raise ValueError(f"{path}: columns must be named t=<value>")
        values = np.array([[float(c) for c in row] for row in reader if row], dtype=float)
    return np.array([float(h[2:]) for h in header]), values.reshape(-1, len(header))


def write_trajectories_csv(traj: Trajectories, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for name, v, t, c in traj.rows:
            writer.writerow([name, _fmt(v), _fmt(t), _fmt(c)])


def read_trajectories_csv(path) -> list[tuple]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRAJECTORY_COLUMNS:
            raise ValueError(f"{path}: unexpected trajectory columns {reader.fieldnames}")
        return [(row["profile"], float(row["covariate_value"]), float(row["t"]), float(row["cate"]))
                for row in reader]


def export_results(obj, path, fmt: str = "json") -> Path:
    """Write a summary, pseudo-outcome matrix or trajectory table as CSV or JSON.

    Floats are written with ``repr`` so reading back is exact.
    """
    path = Path(path)
    if fmt not in ("csv", "json"):
        raise ValueError("format must be 'csv' or 'json'")
    if isinstance(obj, ExperimentSummary):
        if fmt == "json":
            path.write_text(json.dumps(obj.to_dict(), indent=2))
        else:
            write_replicates_csv(obj.replicates, path)
    elif isinstance(obj, PseudoOutcomeMatrix):
        if fmt == "json":
            path.write_text(json.dumps({"times": obj.grid.times.tolist(), "values": obj.values.tolist()}))
        else:
            write_pseudo_csv(obj, path)
    elif isinstance(obj, Trajectories):
        if fmt == "json":
            path.write_text(json.dumps({"columns": list(TRAJECTORY_COLUMNS), "rows": [list(r) for r in obj.rows]}))
        else:
            write_trajectories_csv(obj, path)
    else:
        raise TypeError(f"cannot export {type(obj).__name__}")
    return path


def read_summary(path) -> ExperimentSummary:
    return ExperimentSummary.from_dict(json.loads(Path(path).read_text()))
