"""Command-line interface.

Subcommands mirror the library surface: gen-mdp writes a random MDP as JSON,
solve runs one algorithm on one seeded instance, extract recovers the state
marginal for a saved correction, fig1/ope/constrained drive the full
experiment sweeps, and plot renders a finished CSV to SVG panels.

Every sweep accepts a single JSON config (--config) whose fields individual
flags override; --dry-run prints the resolved plan without running anything.
Exit status is 0 when every cell completed (rows flagged as failed still
count as completed work and only produce a warning); --strict turns any
flagged failure or non-converged solve into exit status 1.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from typing import Optional

import numpy as np

from . import bench
from .bench import ExperimentConfig, default_config, emit_plots
from .divergence import GENERATOR_NAMES
from .extraction import extract_bias_reduced, extract_direct
from .mdp import generate_random_mdp, mdp_to_json
from .metrics import violation_report
from .solvers import correction_from_json, correction_to_json

__all__ = ["main"]

_SWEEPS = {
    "fig1": ("fig1_sweep", bench.run_fig1_sweep, "fig1"),
    "ope": ("ope_compare", bench.run_ope_compare, "ope"),
    "constrained": ("constrained", bench.run_constrained, "constrained"),
}

_ALGORITHMS = ("semidice", "optidice", "sql", "xql", "fdvl", "odice")


def _add_mdp_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None,
                        help="base seed (default 0 or the config's)")
    parser.add_argument("--n-states", type=int, default=None)
    parser.add_argument("--n-actions", type=int, default=None)
    parser.add_argument("--n-successors", type=int, default=None)
    parser.add_argument("--gamma", type=float, default=None)


def _add_data_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--n-trajectories", type=int, default=None)
    parser.add_argument("--horizon", type=int, default=None)
    parser.add_argument("--mix-weight", type=float, default=None,
                        help="behavior policy weight on the optimal policy")


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None,
                        help="JSON experiment config; flags override fields")
    parser.add_argument("--strict", action="store_true",
                        help="exit 1 if any cell failed or did not converge")
    _add_mdp_flags(parser)
    _add_data_flags(parser)


_FIELD_BY_FLAG = {
    "seed": "base_seed",
    "n_states": "n_states",
    "n_actions": "n_actions",
    "n_successors": "n_successors",
    "gamma": "gamma",
    "n_trajectories": "n_trajectories",
    "horizon": "horizon",
    "mix_weight": "mix_weight",
    "runs": "n_runs",
    "output_dir": "output_dir",
    "workers": "workers",
    "timing": "timing",
    "n_cost_states": "n_cost_states",
    "cost_value": "cost_value",
    "n_cost_actions": "n_cost_actions",
    "budget_fraction": "budget_fraction",
}


def _resolve_config(args, experiment: str) -> ExperimentConfig:
    if args.config:
        with open(args.config) as fh:
            cfg = ExperimentConfig.from_json(fh.read())
        if cfg.experiment != experiment:
            raise SystemExit(
                f"error: config is for experiment {cfg.experiment!r}, "
                f"this subcommand runs {experiment!r}")
    else:
        cfg = default_config(experiment)
    overrides = {}
    for flag, field in _FIELD_BY_FLAG.items():
        value = getattr(args, flag, None)
        if value is not None and value is not False:
            overrides[field] = value
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg


def _cmd_gen_mdp(args) -> int:
    mdp = generate_random_mdp(
        args.seed if args.seed is not None else 0,
        args.n_states if args.n_states is not None else 30,
        args.n_actions if args.n_actions is not None else 4,
        args.n_successors if args.n_successors is not None else 4,
        args.gamma if args.gamma is not None else 0.95)
    text = mdp_to_json(mdp)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(text)
            fh.write("\n")
        print(f"wrote {args.output}")
    else:
        print(text)
    return 0


def _single_instance(args):
    """Seeded instance shared by solve and extract: the same MDP, behavior
    policy, dataset, and MLE model a sweep run with this seed would build."""
    cfg = _resolve_config(args, "single_run")
    cfg = dataclasses.replace(cfg, n_runs=1)
    return cfg, bench._build_run_model(cfg, 0)


def _cmd_solve(args) -> int:
    cfg, (mdp, _, _, model) = _single_instance(args)
    alg = {"name": args.algorithm, "generator": args.generator}
    if args.algorithm in ("fdvl", "odice"):
        param_name, param_value = "beta", args.beta
        if args.eta is not None:
            alg["eta"] = args.eta
    else:
        param_name, param_value = "alpha", args.alpha
    alg["param_name"] = param_name
    alg["param_values"] = [param_value]

    corr = bench._solve_cell(model, alg, param_value)
    report = violation_report(corr, model, param_value)
    from .solvers import extract_tabular_policy
    from .mdp import exact_policy_value
    policy = extract_tabular_policy(corr, model)
    exact_return, _ = exact_policy_value(mdp, policy)

    print(f"algorithm:        {args.algorithm} ({corr.generator}), "
          f"{param_name}={param_value}")
    print(f"converged:        {corr.converged} ({corr.iterations} iterations)")
    print(f"viol_bf:          {report.viol_bellman_flow:.6e}")
    print(f"viol_pc:          {report.viol_policy_correction:.6e}")
    print(f"sparse states:    {report.n_sparse_states}")
    print(f"exact return:     {exact_return:.6f}")
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(correction_to_json(corr))
            fh.write("\n")
        print(f"wrote {args.output}")
    if args.strict and not corr.converged:
        return 1
    return 0


def _cmd_extract(args) -> int:
    _, (_, _, _, model) = _single_instance(args)
    with open(args.correction) as fh:
        corr = correction_from_json(fh.read())
    if corr.kind != "per_policy":
        raise SystemExit(
            f"error: extraction needs a per_policy correction, got {corr.kind!r}")
    from .divergence import make_generator
    from .solvers import OptimizerConfig
    g = make_generator(args.generator)
    ocfg = OptimizerConfig(seed=args.sample_seed)
    if args.n_samples:
        res = extract_bias_reduced(model, corr.w_a_given_s, g, ocfg,
                                   "dataset_samples", n_samples=args.n_samples)
    else:
        res = extract_direct(model, corr.w_a_given_s, g, ocfg)
    print(f"converged:        {res.converged} ({res.iterations} iterations)")
    print(f"viol_bf:          {res.viol_bellman_flow:.6e}")
    print(f"w_s range:        [{res.w_s.min():.6f}, {res.w_s.max():.6f}]")
    if args.output:
        payload = {
            "schema_version": 1,
            "kind_tag": "extraction_result",
            "w_s": res.w_s.tolist(),
            "mu": res.mu.tolist(),
            "viol_bellman_flow": res.viol_bellman_flow,
            "converged": res.converged,
            "iterations": res.iterations,
        }
        with open(args.output, "w") as fh:
            fh.write(json.dumps(payload, indent=2, sort_keys=True))
            fh.write("\n")
        print(f"wrote {args.output}")
    if args.strict and not res.converged:
        return 1
    return 0


def _cmd_sweep(args, subcommand: str) -> int:
    experiment, runner, _ = _SWEEPS[subcommand]
    cfg = _resolve_config(args, experiment)
    if args.dry_run:
        print(cfg.describe_plan())
        return 0
    result = runner(cfg)
    print(f"wrote {result.csv_path} ({result.n_rows} rows)")
    print(f"wrote {result.summary_path}")
    if result.n_failed:
        print(f"warning: {result.n_failed} cells failed and were flagged",
              file=sys.stderr)
        if args.strict:
            return 1
    return 0


def _cmd_plot(args) -> int:
    kind = args.kind
    if kind is None:
        name = args.csv.rsplit("/", 1)[-1]
        for prefix, k in (("fig1", "fig1"), ("ope", "ope"),
                          ("constrained", "constrained")):
            if name.startswith(prefix):
                kind = k
                break
        else:
            raise SystemExit(
                "error: cannot infer plot kind from filename; pass --kind")
    written = emit_plots(args.csv, kind)
    for path in written:
        print(f"wrote {path}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dicetab",
        description="Tabular offline-RL benchmark: distribution-correction "
                    "solvers, extraction, and constrained comparisons on "
                    "exactly solvable MDPs.")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-mdp", help="write one random MDP as JSON")
    _add_mdp_flags(p)
    p.add_argument("-o", "--output", default=None,
                   help="output path (default: stdout)")
    p.set_defaults(func=_cmd_gen_mdp)

    p = sub.add_parser("solve", help="run one algorithm on one seeded instance")
    _add_common_flags(p)
    p.add_argument("--algorithm", choices=_ALGORITHMS, default="semidice")
    p.add_argument("--generator", choices=sorted(GENERATOR_NAMES), default="chi2")
    p.add_argument("--alpha", type=float, default=0.01)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("-o", "--output", default=None,
                   help="write the correction as JSON")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("extract",
                       help="recover the state marginal for a saved correction")
    _add_common_flags(p)
    p.add_argument("--correction", required=True,
                   help="correction JSON produced by solve")
    p.add_argument("--generator", choices=sorted(GENERATOR_NAMES), default="kl")
    p.add_argument("--n-samples", type=int, default=None,
                   help="use the sampled refit with this many draws per state")
    p.add_argument("--sample-seed", type=int, default=0)
    p.add_argument("-o", "--output", default=None,
                   help="write the extraction result as JSON")
    p.set_defaults(func=_cmd_extract)

    for name, help_text in (
            ("fig1", "hyperparameter sweep over the random-MDP family"),
            ("ope", "estimator comparison against exact policy values"),
            ("constrained", "constraint-handling comparison on binding instances")):
        p = sub.add_parser(name, help=help_text)
        _add_common_flags(p)
        p.add_argument("--runs", type=int, default=None)
        p.add_argument("--output-dir", default=None)
        p.add_argument("--workers", type=int, default=None,
                       help="worker processes (default: DICETAB_WORKERS or CPU count)")
        p.add_argument("--timing", action="store_true", default=None,
                       help="fill wall_ms with measured times (breaks rerun "
                            "byte-identity)")
        p.add_argument("--dry-run", action="store_true",
                       help="print the resolved plan and exit")
        if name == "constrained":
            p.add_argument("--n-cost-states", type=int, default=None)
            p.add_argument("--cost-value", type=float, default=None)
            p.add_argument("--n-cost-actions", type=int, default=None)
            p.add_argument("--budget-fraction", type=float, default=None)
        p.set_defaults(func=lambda a, _n=name: _cmd_sweep(a, _n))

    p = sub.add_parser("plot", help="render a finished CSV to SVG panels")
    p.add_argument("csv", help="benchmark CSV path")
    p.add_argument("--kind", choices=("fig1", "ope", "constrained"),
                   default=None, help="panel set (default: infer from filename)")
    p.set_defaults(func=_cmd_plot)
    return parser


def main(argv: Optional[list] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
