"""Deterministic experiment drivers and report emission.

Each run_* function maps an ExperimentConfig to a CSV (plus a summary JSON)
that is a pure function of the config: per-run work is seeded from the base
seed, runs execute independently on a bounded process pool, and results are
merged in run-index order, so the worker count never changes a single output
byte. A solver failure inside one cell is recorded as a flagged row (blank
metrics, converged=False) and the sweep continues.

The CSV schema is fixed and versioned; every experiment writes the same
column set and leaves the columns it has no value for empty. Floats are
written with repr (shortest round-trip form) so files are byte-stable.
emit_plots turns a finished CSV into SVG panels with matplotlib.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .constrained import (
    CostSpec,
    coptidice_solve,
    corsdice_solve,
    make_binding_instance,
    naive_constrained_semidice,
)
from .divergence import make_generator
from .extraction import extract_direct, marginal_correction
from .mdp import (
    TabularPolicy,
    build_mle_model,
    collect_dataset,
    exact_policy_value,
    generate_random_mdp,
    mixture_policy,
    value_iteration,
)
from .metrics import ope_estimate, ope_rmse, violation_report
from .solvers import (
    OptimizerConfig,
    extract_tabular_policy,
    fdvl_solve,
    odice_solve,
    optidice_solve,
    semidice_solve,
    sql_solve,
    xql_solve,
)

__all__ = [
    "CSV_COLUMNS",
    "CSV_SCHEMA_VERSION",
    "ALPHA_GRID",
    "BETA_GRID",
    "ExperimentConfig",
    "SweepResult",
    "default_algorithms",
    "default_config",
    "resolve_workers",
    "run_fig1_sweep",
    "run_ope_compare",
    "run_constrained",
    "emit_plots",
]

CSV_SCHEMA_VERSION = 1

CSV_COLUMNS = (
    "run", "algorithm", "generator", "param_name", "param_value",
    "exact_return", "viol_bf", "viol_pc", "ope_reward", "ope_cost",
    "lambda", "feasible", "converged", "wall_ms",
)

# Columns parsed as numbers when a CSV is read back (empty stays None).
_FLOAT_COLUMNS = ("param_value", "exact_return", "viol_bf", "viol_pc",
                  "ope_reward", "ope_cost", "lambda", "wall_ms")

ALPHA_GRID = (0.0001, 0.001, 0.01, 0.1, 1.0, 10.0)
BETA_GRID = (0.1, 0.3, 0.5, 0.7, 0.9, 0.99)

_EXPERIMENTS = ("fig1_sweep", "ope_compare", "constrained", "single_run")

_CONSTRAINED_ALGORITHMS = ("corsdice", "coptidice", "naive_semidice")


def default_algorithms(experiment: str) -> Tuple[dict, ...]:
    """Stock algorithm roster for one experiment kind.

    Each entry is a plain dict: name, generator, param_name, param_values,
    plus optional solver extras (eta, mode, extraction_generator, max_iters,
    tol, step_size) consumed by the matching solver.
    """
    if experiment in ("fig1_sweep", "single_run"):
        return (
            {"name": "semidice", "generator": "chi2",
             "param_name": "alpha", "param_values": list(ALPHA_GRID)},
            {"name": "optidice", "generator": "chi2",
             "param_name": "alpha", "param_values": list(ALPHA_GRID)},
            {"name": "sql", "generator": "sql_chi2",
             "param_name": "alpha", "param_values": list(ALPHA_GRID)},
            {"name": "xql", "generator": "kl",
             "param_name": "alpha", "param_values": list(ALPHA_GRID)},
            {"name": "fdvl", "generator": "chi2",
             "param_name": "beta", "param_values": list(BETA_GRID)},
            {"name": "odice", "generator": "chi2", "eta": 1.0,
             "param_name": "beta", "param_values": list(BETA_GRID)},
        )
    if experiment == "ope_compare":
        return (
            {"name": "semidice", "generator": "chi2",
             "extraction_generator": "kl",
             "param_name": "alpha", "param_values": [0.01]},
        )
    if experiment == "constrained":
        return (
            {"name": "corsdice", "generator": "chi2",
             "extraction_generator": "kl",
             "param_name": "alpha", "param_values": [0.01]},
            {"name": "coptidice", "generator": "chi2",
             "param_name": "alpha", "param_values": [0.01]},
            {"name": "naive_semidice", "generator": "chi2",
             "param_name": "alpha", "param_values": [0.01]},
        )
    raise ValueError(f"experiment must be one of {_EXPERIMENTS}, got {experiment!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Complete description of one experiment; everything downstream is a
    pure function of this object.

    workers <= 0 means auto: the DICETAB_WORKERS environment variable if set,
    else the CPU count (capped at 8). timing=True fills the wall_ms column
    with measured times, which makes reruns non-reproducible byte-for-byte;
    leave it off for anything whose output you want to compare.
    """

    experiment: str = "fig1_sweep"
    n_runs: int = 300
    base_seed: int = 0
    # MDP family
    n_states: int = 30
    n_actions: int = 4
    n_successors: int = 4
    gamma: float = 0.95
    # dataset
    n_trajectories: int = 30
    horizon: int = 100
    mix_weight: float = 0.5
    # algorithm roster; empty tuple means "default for this experiment"
    algorithms: Tuple[dict, ...] = ()
    # cost instance parameters (constrained experiment only)
    n_cost_states: int = 5
    cost_value: float = 1.0
    n_cost_actions: int = 2
    budget_fraction: float = 0.5
    # execution
    output_dir: str = "results"
    timing: bool = False
    workers: int = 0

    def __post_init__(self):
        if self.experiment not in _EXPERIMENTS:
            raise ValueError(
                f"experiment must be one of {_EXPERIMENTS}, got {self.experiment!r}")
        if self.n_runs < 1:
            raise ValueError(f"n_runs must be >= 1, got {self.n_runs}")
        if min(self.n_states, self.n_actions, self.n_successors,
               self.n_trajectories, self.horizon) < 1:
            raise ValueError("MDP and dataset sizes must be positive")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must be in [0, 1), got {self.gamma}")
        if not (0.0 <= self.mix_weight <= 1.0):
            raise ValueError(f"mix_weight must be in [0, 1], got {self.mix_weight}")
        if not self.algorithms:
            object.__setattr__(self, "algorithms",
                               default_algorithms(self.experiment))
        algs = tuple(dict(a) for a in self.algorithms)
        for alg in algs:
            if "name" not in alg:
                raise ValueError(f"algorithm entry without a name: {alg!r}")
            if not alg.get("param_values"):
                raise ValueError(
                    f"algorithm {alg['name']!r} has an empty parameter grid")
        object.__setattr__(self, "algorithms", algs)

    # -- serialization --------------------------------------------------

    def to_json(self) -> str:
        payload = {"schema_version": 1, "kind_tag": "experiment_config"}
        payload.update(asdict(self))
        payload["algorithms"] = [dict(a) for a in self.algorithms]
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        payload = json.loads(text)
        if payload.pop("kind_tag", "experiment_config") != "experiment_config":
            raise ValueError("not an experiment_config document")
        if payload.pop("schema_version", 1) != 1:
            raise ValueError("unsupported experiment_config schema_version")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if "algorithms" in payload:
            payload["algorithms"] = tuple(payload["algorithms"])
        return cls(**payload)

    def describe_plan(self) -> str:
        """Human-readable resolved plan (what --dry-run prints)."""
        cells = sum(len(a["param_values"]) for a in self.algorithms)
        lines = [
            f"experiment:  {self.experiment}",
            f"runs:        {self.n_runs} (seeds {self.base_seed}.."
            f"{self.base_seed + self.n_runs - 1})",
            f"mdp:         {self.n_states} states x {self.n_actions} actions, "
            f"{self.n_successors} successors, gamma={self.gamma}",
            f"dataset:     {self.n_trajectories} trajectories x horizon "
            f"{self.horizon}, behavior mix {self.mix_weight}",
            f"workers:     {resolve_workers(self)}",
            f"output dir:  {self.output_dir}",
            f"cells/run:   {cells}",
        ]
        if self.experiment == "constrained":
            lines.append(
                f"costs:       {self.n_cost_states} states x "
                f"{self.n_cost_actions} actions, value {self.cost_value}, "
                f"budget fraction {self.budget_fraction}")
        lines.append("algorithms:")
        for alg in self.algorithms:
            lines.append(
                f"  - {alg['name']} ({alg.get('generator', '-')}) "
                f"{alg.get('param_name', '-')} in {list(alg['param_values'])}")
        return "\n".join(lines)


def default_config(experiment: str, **overrides) -> ExperimentConfig:
    """Config with the tuned per-experiment defaults.

    The estimator comparison uses larger datasets (200 trajectories) because
    its absolute-accuracy check is limited by model estimation error, and the
    constrained experiment uses horizon 200 to match the instance generator's
    calibration; the hyperparameter sweep keeps the 30 x 100 protocol.
    """
    base = {"experiment": experiment}
    if experiment == "ope_compare":
        base.update(n_runs=50, n_trajectories=200)
    elif experiment == "constrained":
        base.update(n_runs=100, horizon=200)
    base.update(overrides)
    return ExperimentConfig(**base)


@dataclass(frozen=True)
class SweepResult:
    """Where a finished experiment landed, plus its failure count."""

    csv_path: str
    summary_path: str
    n_rows: int
    n_failed: int


def resolve_workers(cfg: ExperimentConfig) -> int:
    if cfg.workers > 0:
        return cfg.workers
    env = os.environ.get("DICETAB_WORKERS", "").strip()
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"DICETAB_WORKERS must be >= 1, got {env!r}")
        return n
    return min(os.cpu_count() or 1, 8)


# -- shared run plumbing -----------------------------------------------------


def _blank_row(run: int, alg: dict, param_value) -> Dict[str, object]:
    return {
        "run": run,
        "algorithm": alg["name"],
        "generator": alg.get("generator", ""),
        "param_name": alg.get("param_name", ""),
        "param_value": param_value,
        "exact_return": None, "viol_bf": None, "viol_pc": None,
        "ope_reward": None, "ope_cost": None, "lambda": None,
        "feasible": None, "converged": False, "wall_ms": 0,
    }


def _optimizer_config(alg: dict, alpha: Optional[float] = None) -> OptimizerConfig:
    kw = {}
    if alpha is not None:
        kw["alpha"] = alpha
    for key in ("max_iters", "tol", "step_size", "method", "damping"):
        if key in alg:
            kw[key] = alg[key]
    return OptimizerConfig(**kw)


def _build_run_model(cfg: ExperimentConfig, run_idx: int):
    """The shared per-run protocol: random MDP, behavior policy as a mixture
    of its optimal policy with uniform, one logged dataset, MLE model."""
    mdp = generate_random_mdp(cfg.base_seed + run_idx, cfg.n_states,
                              cfg.n_actions, cfg.n_successors, cfg.gamma)
    _, _, pi_star = value_iteration(mdp)
    uniform = TabularPolicy(np.full((cfg.n_states, cfg.n_actions),
                                    1.0 / cfg.n_actions))
    behavior = mixture_policy(pi_star, uniform, cfg.mix_weight)
    dataset = collect_dataset(mdp, behavior, cfg.n_trajectories, cfg.horizon,
                              cfg.base_seed + run_idx + 10**6)
    model = build_mle_model(dataset, cfg.n_states, cfg.n_actions)
    return mdp, behavior, dataset, model


def _solve_cell(model, alg: dict, param_value: float):
    """Dispatch one (algorithm, hyperparameter) cell to its solver."""
    name = alg["name"]
    gen = alg.get("generator", "chi2")
    if name == "semidice":
        return semidice_solve(model, make_generator(gen),
                              _optimizer_config(alg, alpha=param_value))
    if name == "optidice":
        return optidice_solve(model, make_generator(gen),
                              _optimizer_config(alg, alpha=param_value))
    if name == "sql":
        return sql_solve(model, param_value, _optimizer_config(alg))
    if name == "xql":
        return xql_solve(model, param_value, _optimizer_config(alg))
    if name == "fdvl":
        return fdvl_solve(model, make_generator(gen), param_value,
                          _optimizer_config(alg))
    if name == "odice":
        return odice_solve(model, make_generator(gen), param_value,
                           alg.get("eta", 1.0), _optimizer_config(alg),
                           mode=alg.get("mode", "orthogonal"))
    raise ValueError(f"unknown algorithm {name!r}")


def _map_runs(worker, cfg: ExperimentConfig) -> list:
    """Execute worker((cfg, i)) for every run index on the pool; results come
    back in run order regardless of completion order or worker count."""
    n_workers = min(resolve_workers(cfg), cfg.n_runs)
    if n_workers <= 1:
        return [worker((cfg, i)) for i in range(cfg.n_runs)]
    out = [None] * cfg.n_runs
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        futures = {pool.submit(worker, (cfg, i)): i for i in range(cfg.n_runs)}
        for fut in as_completed(futures):
            out[futures[fut]] = fut.result()
    return out


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: str, rows: Sequence[Dict[str, object]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[col]) for col in CSV_COLUMNS])


def _write_summary(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(payload, indent=2, sort_keys=True))
        fh.write("\n")


def _mean_std(values: List[float]) -> Tuple[float, float]:
    arr = np.asarray(values, float)
    return float(arr.mean()), float(arr.std())


def _failed(row: Dict[str, object]) -> bool:
    return row["exact_return"] is None


# -- fig1 sweep ---------------------------------------------------------------


def _fig1_run(args) -> List[Dict[str, object]]:
    cfg, run_idx = args
    mdp, _, _, model = _build_run_model(cfg, run_idx)
    rows = []
    for alg in cfg.algorithms:
        for param_value in alg["param_values"]:
            row = _blank_row(run_idx, alg, param_value)
            t0 = time.perf_counter()
            try:
                corr = _solve_cell(model, alg, param_value)
                report = violation_report(corr, model, param_value)
                policy = extract_tabular_policy(corr, model)
                # Return of the extracted policy on the true environment.
                exact_return, _ = exact_policy_value(mdp, policy)
                w = corr.primary()
                row.update({
                    "generator": corr.generator,
                    "exact_return": exact_return,
                    "viol_bf": report.viol_bellman_flow,
                    "viol_pc": report.viol_policy_correction,
                    "ope_reward": ope_estimate(w, model, "reward"),
                    "ope_cost": ope_estimate(w, model, "cost"),
                    "converged": corr.converged,
                })
            except Exception:
                pass  # flagged row stays blank; the sweep must finish
            if cfg.timing:
                row["wall_ms"] = (time.perf_counter() - t0) * 1e3
            rows.append(row)
    return rows


def run_fig1_sweep(cfg: ExperimentConfig) -> SweepResult:
    """Hyperparameter sweep over the random-MDP family.

    One row per (run, algorithm, hyperparameter value) with the extracted
    policy's exact return on the generating MDP and both violation metrics
    on the MLE model. The summary JSON aggregates per-cell means and
    standard deviations.
    """
    if cfg.experiment not in ("fig1_sweep", "single_run"):
        raise ValueError(f"config is for {cfg.experiment!r}, not a fig1 sweep")
    per_run = _map_runs(_fig1_run, cfg)
    rows = [row for run_rows in per_run for row in run_rows]

    cells: Dict[str, Dict[str, list]] = {}
    n_failed = 0
    for row in rows:
        if _failed(row):
            n_failed += 1
            continue
        key = (f"{row['algorithm']}|{row['generator']}|"
               f"{row['param_name']}={_fmt(row['param_value'])}")
        cell = cells.setdefault(key, {"exact_return": [], "viol_bf": [],
                                      "viol_pc": []})
        for metric in cell:
            cell[metric].append(row[metric])
    summary_cells = {}
    for key, cell in cells.items():
        entry = {"n": len(cell["exact_return"])}
        for metric, values in cell.items():
            mean, std = _mean_std(values)
            entry[f"{metric}_mean"] = mean
            entry[f"{metric}_std"] = std
        summary_cells[key] = entry

    os.makedirs(cfg.output_dir, exist_ok=True)
    csv_path = os.path.join(cfg.output_dir, f"{cfg.experiment}.csv")
    summary_path = os.path.join(cfg.output_dir, f"{cfg.experiment}_summary.json")
    _write_csv(csv_path, rows)
    _write_summary(summary_path, {
        "schema_version": CSV_SCHEMA_VERSION,
        "experiment": cfg.experiment,
        "n_runs": cfg.n_runs,
        "n_failed": n_failed,
        "cells": summary_cells,
    })
    return SweepResult(csv_path, summary_path, len(rows), n_failed)


# -- off-policy evaluation comparison ----------------------------------------


def _ope_run(args) -> List[Dict[str, object]]:
    cfg, run_idx = args
    mdp, behavior, _, model = _build_run_model(cfg, run_idx)
    rows = []
    for alg in cfg.algorithms:
        ext_gen = make_generator(alg.get("extraction_generator", "kl"))
        for param_value in alg["param_values"]:
            raw_row = _blank_row(run_idx, alg, param_value)
            raw_row["algorithm"] = f"{alg['name']}_raw"
            ext_row = _blank_row(run_idx, alg, param_value)
            ext_row["algorithm"] = f"{alg['name']}_extraction"
            ext_row["generator"] = alg.get("extraction_generator", "kl")
            try:
                corr = _solve_cell(model, alg, param_value)
                report = violation_report(corr, model, param_value)
                policy = extract_tabular_policy(corr, model)
                # The target every estimator is judged against: the exact
                # value of the evaluated policy on the true environment.
                rho, _ = exact_policy_value(mdp, policy)
                w_policy = corr.primary()
                raw_row.update({
                    "exact_return": rho,
                    "viol_bf": report.viol_bellman_flow,
                    "viol_pc": report.viol_policy_correction,
                    "ope_reward": ope_estimate(w_policy, model, "reward"),
                    "ope_cost": ope_estimate(w_policy, model, "cost"),
                    "converged": corr.converged,
                })
                ext = extract_direct(model, w_policy, ext_gen,
                                     _optimizer_config(alg))
                w_full = marginal_correction(ext, w_policy)
                ext_row.update({
                    "exact_return": rho,
                    "viol_bf": ext.viol_bellman_flow,
                    "viol_pc": report.viol_policy_correction,
                    "ope_reward": ope_estimate(w_full, model, "reward"),
                    "ope_cost": ope_estimate(w_full, model, "cost"),
                    "converged": corr.converged and ext.converged,
                })
            except Exception:
                pass
            rows.append(raw_row)
            rows.append(ext_row)
    # Control: the constant correction w = 1 estimates the behavior policy
    # itself; its estimate is exactly the dataset mean reward.
    control = _blank_row(run_idx, {"name": "control_w1", "generator": "",
                                   "param_name": "", "param_values": []}, None)
    ones = np.ones((cfg.n_states, cfg.n_actions))
    rho_b, _ = exact_policy_value(mdp, behavior)
    control.update({
        "exact_return": rho_b,
        "viol_bf": 0.0, "viol_pc": 0.0,
        "ope_reward": ope_estimate(ones, model, "reward"),
        "ope_cost": ope_estimate(ones, model, "cost"),
        "converged": True,
    })
    rows.append(control)
    return rows


def run_ope_compare(cfg: ExperimentConfig) -> SweepResult:
    """Estimator comparison on random MDPs.

    Per run: solve the configured per-policy algorithm, evaluate its
    extracted policy exactly on the generating MDP (the target), and record
    two estimates of that target — the raw per-policy weights plugged into
    the importance estimator, and the same weights combined with the
    extracted state marginal. A constant-weight control row estimates the
    behavior policy. The summary JSON reports per-estimator RMSEs and the
    spread of the targets.
    """
    if cfg.experiment != "ope_compare":
        raise ValueError(f"config is for {cfg.experiment!r}, not ope_compare")
    per_run = _map_runs(_ope_run, cfg)
    rows = [row for run_rows in per_run for row in run_rows]

    pairs: Dict[str, List[Tuple[float, float]]] = {}
    targets = []
    n_failed = 0
    for row in rows:
        if _failed(row):
            n_failed += 1
            continue
        pairs.setdefault(row["algorithm"], []).append(
            (row["ope_reward"], row["exact_return"]))
        if row["algorithm"].endswith("_extraction"):
            targets.append(row["exact_return"])
    rmse = {name: ope_rmse(p) for name, p in sorted(pairs.items())}
    rho_range = float(max(targets) - min(targets)) if targets else 0.0

    os.makedirs(cfg.output_dir, exist_ok=True)
    csv_path = os.path.join(cfg.output_dir, "ope_compare.csv")
    summary_path = os.path.join(cfg.output_dir, "ope_compare_summary.json")
    _write_csv(csv_path, rows)
    _write_summary(summary_path, {
        "schema_version": CSV_SCHEMA_VERSION,
        "experiment": "ope_compare",
        "n_runs": cfg.n_runs,
        "n_failed": n_failed,
        "rmse": rmse,
        "rho_range": rho_range,
    })
    return SweepResult(csv_path, summary_path, len(rows), n_failed)


# -- constrained comparison ---------------------------------------------------


def _constrained_instance(cfg: ExperimentConfig, seed: int):
    if cfg.cost_value > 0.0:
        return make_binding_instance(
            seed, n_states=cfg.n_states, n_actions=cfg.n_actions,
            n_successors=cfg.n_successors, gamma=cfg.gamma,
            n_cost_states=cfg.n_cost_states, cost_value=cfg.cost_value,
            n_cost_actions=cfg.n_cost_actions,
            n_trajectories=cfg.n_trajectories, horizon=cfg.horizon,
            mix_weight=cfg.mix_weight, budget_fraction=cfg.budget_fraction)
    # Zero-cost configuration: nothing to bind against; every solver should
    # sit at lambda = 0 and be trivially feasible.
    mdp, _, dataset, model = _build_run_model(cfg, seed - cfg.base_seed)
    spec = CostSpec(cost=np.zeros((cfg.n_states, cfg.n_actions)),
                    c_lim=0.0, gamma=cfg.gamma)
    info = {"attempts": 1, "c_unc": 0.0, "c_min": 0.0, "c_tilde": 0.0}
    return mdp, dataset, model, spec, info


def _constrained_run(args):
    cfg, run_idx = args
    rows = []
    extras = {"run": run_idx, "c_tilde": None, "attempts": None}
    try:
        _, _, model, spec, info = _constrained_instance(
            cfg, cfg.base_seed + run_idx)
    except Exception:
        for alg in cfg.algorithms:
            rows.append(_blank_row(run_idx, alg, None))
        return rows, extras
    extras["c_tilde"] = spec.c_tilde
    extras["attempts"] = info["attempts"]
    for alg in cfg.algorithms:
        name = alg["name"]
        for param_value in alg["param_values"]:
            row = _blank_row(run_idx, alg, None)
            row["param_name"] = "exact_cost"
            t0 = time.perf_counter()
            try:
                ocfg = _optimizer_config(alg, alpha=param_value)
                g = make_generator(alg.get("generator", "chi2"))
                if name == "corsdice":
                    g_state = make_generator(
                        alg.get("extraction_generator", "kl"))
                    res = corsdice_solve(model, g, g_state, spec, ocfg)
                elif name == "coptidice":
                    res = coptidice_solve(model, g, spec, ocfg)
                elif name == "naive_semidice":
                    res = naive_constrained_semidice(model, g, spec, ocfg)
                else:
                    raise ValueError(
                        f"constrained algorithm must be one of "
                        f"{_CONSTRAINED_ALGORITHMS}, got {name!r}")
                corr = res.correction
                report = violation_report(corr, model, param_value)
                if res.extraction is not None:
                    viol_bf = res.extraction.viol_bellman_flow
                    w_est = marginal_correction(res.extraction,
                                                corr.w_a_given_s)
                else:
                    viol_bf = report.viol_bellman_flow
                    w_est = corr.primary()
                row.update({
                    "param_value": res.exact_cost,
                    "exact_return": res.exact_return,
                    "viol_bf": viol_bf,
                    "viol_pc": report.viol_policy_correction,
                    "ope_reward": ope_estimate(w_est, model, "reward"),
                    "ope_cost": res.estimated_cost,
                    "lambda": res.lambda_cost,
                    "feasible": res.feasible,
                    "converged": res.converged,
                })
            except Exception:
                pass
            if cfg.timing:
                row["wall_ms"] = (time.perf_counter() - t0) * 1e3
            rows.append(row)
    return rows, extras


def run_constrained(cfg: ExperimentConfig) -> SweepResult:
    """Constraint-handling comparison on binding cost instances.

    Per run: build one instance whose budget the unconstrained optimum
    violates, then run each configured solver. Rows record the exact cost
    (param_value, under param_name=exact_cost), the solver's own cost
    estimate (ope_cost), the final multiplier, and the feasibility verdict,
    so the estimated-versus-exact scatter and feasibility rates regenerate
    from the CSV alone. Per-run budgets live in the summary JSON.
    """
    if cfg.experiment != "constrained":
        raise ValueError(f"config is for {cfg.experiment!r}, not constrained")
    per_run = _map_runs(_constrained_run, cfg)
    rows = [row for run_rows, _ in per_run for row in run_rows]
    instances = [extras for _, extras in per_run]

    n_failed = 0
    feasible_counts: Dict[str, List[bool]] = {}
    gaps: Dict[str, List[float]] = {}
    for row in rows:
        if _failed(row):
            n_failed += 1
            continue
        feasible_counts.setdefault(row["algorithm"], []).append(
            bool(row["feasible"]))
        gaps.setdefault(row["algorithm"], []).append(
            abs(row["ope_cost"] - row["param_value"]))
    feasibility_rate = {name: float(np.mean(flags))
                        for name, flags in sorted(feasible_counts.items())}
    median_cost_gap = {name: float(np.median(vals))
                       for name, vals in sorted(gaps.items())}

    os.makedirs(cfg.output_dir, exist_ok=True)
    csv_path = os.path.join(cfg.output_dir, "constrained.csv")
    summary_path = os.path.join(cfg.output_dir, "constrained_summary.json")
    _write_csv(csv_path, rows)
    _write_summary(summary_path, {
        "schema_version": CSV_SCHEMA_VERSION,
        "experiment": "constrained",
        "n_runs": cfg.n_runs,
        "n_failed": n_failed,
        "feasibility_rate": feasibility_rate,
        "median_cost_gap": median_cost_gap,
        "instances": instances,
    })
    return SweepResult(csv_path, summary_path, len(rows), n_failed)


# -- plotting -----------------------------------------------------------------


def _read_rows(csv_path: str) -> List[Dict[str, object]]:
    """Read a benchmark CSV back, raising on any malformed line with its
    1-based line number."""
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{csv_path}: line 1: empty file, expected "
                             f"header {','.join(CSV_COLUMNS)}") from None
        if header != list(CSV_COLUMNS):
            raise ValueError(
                f"{csv_path}: line 1: unexpected header {header!r}")
        rows = []
        for lineno, record in enumerate(reader, start=2):
            if len(record) != len(CSV_COLUMNS):
                raise ValueError(
                    f"{csv_path}: line {lineno}: expected {len(CSV_COLUMNS)} "
                    f"fields, got {len(record)}")
            row = dict(zip(CSV_COLUMNS, record))
            for col in ("run",) + _FLOAT_COLUMNS:
                text = row[col]
                if text == "":
                    row[col] = None
                    continue
                try:
                    row[col] = int(text) if col == "run" else float(text)
                except ValueError:
                    raise ValueError(
                        f"{csv_path}: line {lineno}: column {col!r}: cannot "
                        f"parse {text!r} as a number") from None
            rows.append(row)
    return rows


def _algorithms_in(rows) -> List[str]:
    seen: Dict[str, None] = {}
    for row in rows:
        seen.setdefault(row["algorithm"])
    return sorted(seen)


def _fig1_panel(plt, rows, metric: str, ylabel: str, log_y: bool, path: str):
    fig, ax = plt.subplots(figsize=(5.0, 3.75))
    for name in _algorithms_in(rows):
        by_param: Dict[float, List[float]] = {}
        for row in rows:
            if row["algorithm"] != name or row[metric] is None \
                    or row["param_value"] is None:
                continue
            by_param.setdefault(row["param_value"], []).append(row[metric])
        if not by_param:
            continue
        xs = sorted(by_param)
        ys = [float(np.mean(by_param[x])) for x in xs]
        if log_y:
            ys = [max(y, 1e-16) for y in ys]
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xscale("log")
    if log_y:
        ax.set_yscale("log")
    ax.set_xlabel("hyperparameter")
    ax.set_ylabel(ylabel)
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def emit_plots(csv_path: str, kind: str) -> List[str]:
    """Render a finished benchmark CSV to SVG panels.

    kind=fig1 emits three panels (mean return, Bellman flow violation,
    policy-correction violation, each versus the hyperparameter on a log
    axis); kind=ope emits one estimated-versus-exact scatter; and
    kind=constrained emits a feasibility-rate bar chart plus the
    estimated-versus-exact cost scatter. An empty-but-headered CSV yields
    the same files with empty axes. Returns the written paths.
    """
    if kind not in ("fig1", "ope", "constrained"):
        raise ValueError(f"kind must be fig1, ope, or constrained, got {kind!r}")
    rows = _read_rows(csv_path)
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    stem = os.path.splitext(csv_path)[0]
    written = []
    if kind == "fig1":
        for metric, suffix, ylabel, log_y in (
                ("exact_return", "return", "mean exact return", False),
                ("viol_bf", "viol_bf", "Bellman flow violation", True),
                ("viol_pc", "viol_pc", "policy correction violation", True)):
            path = f"{stem}_{suffix}.svg"
            _fig1_panel(plt, rows, metric, ylabel, log_y, path)
            written.append(path)
    elif kind == "ope":
        path = f"{stem}_ope.svg"
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        points = [(row["exact_return"], row["ope_reward"], row["algorithm"])
                  for row in rows
                  if row["exact_return"] is not None
                  and row["ope_reward"] is not None]
        for name in sorted({p[2] for p in points}):
            xs = [p[0] for p in points if p[2] == name]
            ys = [p[1] for p in points if p[2] == name]
            ax.scatter(xs, ys, s=12, label=name)
        if points:
            lo = min(min(p[0] for p in points), min(p[1] for p in points))
            hi = max(max(p[0] for p in points), max(p[1] for p in points))
            ax.plot([lo, hi], [lo, hi], color="gray", linewidth=0.8,
                    linestyle="--")
        ax.set_xlabel("exact value")
        ax.set_ylabel("estimated value")
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg")
        plt.close(fig)
        written.append(path)
    else:
        path = f"{stem}_feasibility.svg"
        fig, ax = plt.subplots(figsize=(4.5, 3.5))
        names, rates = [], []
        for name in _algorithms_in(rows):
            flags = [row["feasible"] == "True" for row in rows
                     if row["algorithm"] == name and row["feasible"] != ""]
            if flags:
                names.append(name)
                rates.append(float(np.mean(flags)))
        ax.bar(names, rates)
        ax.set_ylim(0.0, 1.05)
        ax.set_ylabel("feasibility rate")
        fig.tight_layout()
        fig.savefig(path, format="svg")
        plt.close(fig)
        written.append(path)

        path = f"{stem}_cost_scatter.svg"
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        points = [(row["param_value"], row["ope_cost"], row["algorithm"])
                  for row in rows
                  if row["param_name"] == "exact_cost"
                  and row["param_value"] is not None
                  and row["ope_cost"] is not None]
        for name in sorted({p[2] for p in points}):
            xs = [p[0] for p in points if p[2] == name]
            ys = [p[1] for p in points if p[2] == name]
            ax.scatter(xs, ys, s=12, label=name)
        if points:
            lo = min(min(p[0] for p in points), min(p[1] for p in points))
            hi = max(max(p[0] for p in points), max(p[1] for p in points))
            ax.plot([lo, hi], [lo, hi], color="gray", linewidth=0.8,
                    linestyle="--")
        ax.set_xlabel("exact cost")
        ax.set_ylabel("estimated cost")
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(path, format="svg")
        plt.close(fig)
        written.append(path)
    return written
