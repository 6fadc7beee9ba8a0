"""Experiment drivers: configs, CSV schema, determinism, summaries, plots."""

import json
import os
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from dicetab import (
    ExperimentConfig,
    default_config,
    emit_plots,
    ope_rmse,
    run_constrained,
    run_fig1_sweep,
    run_ope_compare,
)
from dicetab.bench import (
    ALPHA_GRID,
    BETA_GRID,
    CSV_COLUMNS,
    _fmt,
    _read_rows,
    default_algorithms,
    resolve_workers,
)

DATA_DIR = Path(__file__).parent / "data"

# Pinned miniature sweep: the golden file in tests/data was produced from
# exactly this config, so any byte drift in the pipeline shows up here.
GOLDEN_KWARGS = dict(
    experiment="fig1_sweep",
    n_runs=2,
    n_states=12,
    n_actions=3,
    n_successors=3,
    n_trajectories=20,
    horizon=50,
    algorithms=(
        {"name": "semidice", "generator": "chi2",
         "param_name": "alpha", "param_values": [0.01, 1.0]},
        {"name": "optidice", "generator": "chi2",
         "param_name": "alpha", "param_values": [0.1]},
        {"name": "sql", "generator": "sql_chi2",
         "param_name": "alpha", "param_values": [0.05]},
        {"name": "xql", "generator": "kl",
         "param_name": "alpha", "param_values": [0.1]},
        {"name": "fdvl", "generator": "chi2",
         "param_name": "beta", "param_values": [0.5]},
    ),
)


# -- configuration -------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError, match="experiment"):
        ExperimentConfig(experiment="fig2")
    with pytest.raises(ValueError, match="n_runs"):
        ExperimentConfig(n_runs=0)
    with pytest.raises(ValueError, match="positive"):
        ExperimentConfig(n_states=0)
    with pytest.raises(ValueError, match="gamma"):
        ExperimentConfig(gamma=1.0)
    with pytest.raises(ValueError, match="mix_weight"):
        ExperimentConfig(mix_weight=1.5)
    with pytest.raises(ValueError, match="name"):
        ExperimentConfig(algorithms=({"param_values": [1.0]},))
    with pytest.raises(ValueError, match="empty parameter grid"):
        ExperimentConfig(algorithms=({"name": "semidice", "param_values": []},))


def test_config_defaults_fill_algorithms():
    cfg = ExperimentConfig()
    assert [a["name"] for a in cfg.algorithms] == \
        ["semidice", "optidice", "sql", "xql", "fdvl", "odice"]
    assert cfg.algorithms[0]["param_values"] == list(ALPHA_GRID)
    assert cfg.algorithms[-1]["param_values"] == list(BETA_GRID)


def test_config_json_roundtrip():
    cfg = ExperimentConfig(**GOLDEN_KWARGS)
    again = ExperimentConfig.from_json(cfg.to_json())
    assert again == cfg
    payload = json.loads(cfg.to_json())
    assert payload["kind_tag"] == "experiment_config"
    assert payload["schema_version"] == 1


def test_config_json_rejects_unknown_and_foreign():
    with pytest.raises(ValueError, match="unknown config fields"):
        ExperimentConfig.from_json('{"n_runs": 2, "flavour": "salty"}')
    with pytest.raises(ValueError, match="experiment_config"):
        ExperimentConfig.from_json('{"kind_tag": "zoo"}')
    with pytest.raises(ValueError, match="schema_version"):
        ExperimentConfig.from_json(
            '{"kind_tag": "experiment_config", "schema_version": 99}')


def test_describe_plan_mentions_the_essentials():
    cfg = ExperimentConfig(**GOLDEN_KWARGS)
    plan = cfg.describe_plan()
    assert "fig1_sweep" in plan
    assert "seeds 0..1" in plan
    assert "12 states x 3 actions" in plan
    assert "cells/run:   6" in plan
    assert "semidice (chi2) alpha in [0.01, 1.0]" in plan
    constrained = default_config("constrained", n_runs=2)
    assert "budget fraction" in constrained.describe_plan()


def test_default_config_per_experiment_tuning():
    ope = default_config("ope_compare")
    assert ope.n_runs == 50 and ope.n_trajectories == 200
    con = default_config("constrained")
    assert con.n_runs == 100 and con.horizon == 200
    fig = default_config("fig1_sweep")
    assert fig.n_runs == 300 and fig.horizon == 100
    override = default_config("ope_compare", n_runs=3)
    assert override.n_runs == 3 and override.n_trajectories == 200


def test_default_algorithms_rosters():
    assert len(default_algorithms("fig1_sweep")) == 6
    assert len(default_algorithms("ope_compare")) == 1
    names = [a["name"] for a in default_algorithms("constrained")]
    assert names == ["corsdice", "coptidice", "naive_semidice"]
    with pytest.raises(ValueError, match="experiment"):
        default_algorithms("fig9")


def test_resolve_workers(monkeypatch):
    explicit = ExperimentConfig(workers=3)
    assert resolve_workers(explicit) == 3
    auto = ExperimentConfig(workers=0)
    monkeypatch.setenv("DICETAB_WORKERS", "5")
    assert resolve_workers(auto) == 5
    monkeypatch.setenv("DICETAB_WORKERS", "0")
    with pytest.raises(ValueError, match="DICETAB_WORKERS"):
        resolve_workers(auto)
    monkeypatch.delenv("DICETAB_WORKERS")
    assert resolve_workers(auto) == min(os.cpu_count() or 1, 8)


# -- sweep outputs ---------------------------------------------------------------


def test_fig1_sweep_matches_golden_csv(tmp_path):
    cfg = ExperimentConfig(output_dir=str(tmp_path), workers=1,
                           **GOLDEN_KWARGS)
    res = run_fig1_sweep(cfg)
    assert res.n_failed == 0
    assert res.n_rows == 2 * 6
    produced = Path(res.csv_path).read_bytes()
    golden = (DATA_DIR / "fig1_small.csv").read_bytes()
    assert produced == golden


def test_fig1_sweep_worker_count_does_not_change_bytes(tmp_path):
    one = ExperimentConfig(output_dir=str(tmp_path / "w1"), workers=1,
                           **GOLDEN_KWARGS)
    two = ExperimentConfig(output_dir=str(tmp_path / "w2"), workers=2,
                           **GOLDEN_KWARGS)
    r1 = run_fig1_sweep(one)
    r2 = run_fig1_sweep(two)
    assert Path(r1.csv_path).read_bytes() == Path(r2.csv_path).read_bytes()
    assert Path(r1.summary_path).read_bytes() == \
        Path(r2.summary_path).read_bytes()


def test_fig1_sweep_summary_aggregates_match_rows(tmp_path):
    cfg = ExperimentConfig(output_dir=str(tmp_path), workers=1,
                           **GOLDEN_KWARGS)
    res = run_fig1_sweep(cfg)
    rows = _read_rows(res.csv_path)
    summary = json.loads(Path(res.summary_path).read_text())
    key = "semidice|chi2|alpha=0.01"
    got = summary["cells"][key]
    vals = [row["exact_return"] for row in rows
            if row["algorithm"] == "semidice" and row["param_value"] == 0.01]
    assert got["n"] == len(vals) == 2
    assert got["exact_return_mean"] == pytest.approx(np.mean(vals))
    assert got["exact_return_std"] == pytest.approx(np.std(vals))


def test_fig1_sweep_failures_are_flagged_not_fatal(tmp_path):
    algorithms = (
        {"name": "semidice", "generator": "chi2",
         "param_name": "alpha", "param_values": [0.1]},
        {"name": "zoo", "generator": "chi2",
         "param_name": "alpha", "param_values": [0.1]},
    )
    kwargs = dict(GOLDEN_KWARGS)
    kwargs["algorithms"] = algorithms
    cfg = ExperimentConfig(output_dir=str(tmp_path), workers=1, **kwargs)
    res = run_fig1_sweep(cfg)
    assert res.n_failed == 2  # one bad cell per run
    rows = _read_rows(res.csv_path)
    bad = [r for r in rows if r["algorithm"] == "zoo"]
    assert len(bad) == 2
    for row in bad:
        assert row["exact_return"] is None
        assert row["converged"] == "False"
    good = [r for r in rows if r["algorithm"] == "semidice"]
    assert all(r["exact_return"] is not None for r in good)


def test_experiment_kind_guards(tmp_path):
    fig1 = ExperimentConfig(output_dir=str(tmp_path), **GOLDEN_KWARGS)
    with pytest.raises(ValueError, match="not ope_compare"):
        run_ope_compare(fig1)
    with pytest.raises(ValueError, match="not constrained"):
        run_constrained(fig1)
    ope = default_config("ope_compare", n_runs=1)
    with pytest.raises(ValueError, match="not a fig1 sweep"):
        run_fig1_sweep(ope)


@pytest.fixture(scope="module")
def ope_result(tmp_path_factory):
    out = tmp_path_factory.mktemp("ope")
    cfg = default_config("ope_compare", n_runs=3, n_states=12, n_actions=3,
                         n_successors=3, n_trajectories=60, horizon=50,
                         output_dir=str(out), workers=1)
    return run_ope_compare(cfg)


def test_ope_compare_rows_and_rmse(ope_result):
    rows = _read_rows(ope_result.csv_path)
    # per run: raw + extraction + control
    assert len(rows) == 3 * 3
    names = {row["algorithm"] for row in rows}
    assert names == {"semidice_raw", "semidice_extraction", "control_w1"}
    summary = json.loads(Path(ope_result.summary_path).read_text())
    for name in names:
        pairs = [(row["ope_reward"], row["exact_return"])
                 for row in rows if row["algorithm"] == name]
        assert summary["rmse"][name] == pytest.approx(ope_rmse(pairs))
    assert summary["rho_range"] >= 0.0
    # extraction strictly repairs the raw estimate
    assert summary["rmse"]["semidice_extraction"] < \
        summary["rmse"]["semidice_raw"]


def test_ope_compare_control_estimates_behavior(ope_result):
    rows = _read_rows(ope_result.csv_path)
    for row in rows:
        if row["algorithm"] != "control_w1":
            continue
        # w = 1 estimates the behavior policy's value from its own data;
        # on these sample sizes the dataset mean sits near the exact value
        assert row["ope_reward"] == pytest.approx(row["exact_return"],
                                                  abs=0.05)


@pytest.fixture(scope="module")
def constrained_result(tmp_path_factory):
    out = tmp_path_factory.mktemp("constrained")
    cfg = default_config("constrained", n_runs=2, output_dir=str(out),
                         workers=1)
    return run_constrained(cfg)


def test_constrained_rows_and_summary(constrained_result):
    rows = _read_rows(constrained_result.csv_path)
    assert len(rows) == 2 * 3
    summary = json.loads(Path(constrained_result.summary_path).read_text())
    assert set(summary["feasibility_rate"]) == \
        {"corsdice", "coptidice", "naive_semidice"}
    assert set(summary["median_cost_gap"]) == set(summary["feasibility_rate"])
    assert len(summary["instances"]) == 2
    for extras in summary["instances"]:
        assert extras["c_tilde"] > 0.0
        assert extras["attempts"] >= 1
    for row in rows:
        assert row["param_name"] == "exact_cost"
        assert row["param_value"] is not None  # the exact cost
        assert row["ope_cost"] is not None     # the estimated cost
        assert row["lambda"] is not None
        assert row["feasible"] in ("True", "False")
    # the repaired estimator tracks cost much better than the naive one
    assert summary["median_cost_gap"]["corsdice"] < \
        0.1 * summary["median_cost_gap"]["naive_semidice"]


# -- CSV reading -------------------------------------------------------------------


def test_read_rows_error_reporting(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(ValueError, match=r"line 1: empty file"):
        _read_rows(str(empty))

    bad_header = tmp_path / "header.csv"
    bad_header.write_text("a,b,c\n")
    with pytest.raises(ValueError, match=r"line 1: unexpected header"):
        _read_rows(str(bad_header))

    short = tmp_path / "short.csv"
    short.write_text(",".join(CSV_COLUMNS) + "\n1,semidice\n")
    with pytest.raises(ValueError, match=r"line 2: expected 14 fields, got 2"):
        _read_rows(str(short))

    unparsable = tmp_path / "nan.csv"
    blanks = [""] * (len(CSV_COLUMNS) - 5)
    unparsable.write_text(",".join(CSV_COLUMNS) + "\n"
                          + ",".join(["1", "semidice", "chi2", "alpha",
                                      "much"] + blanks) + "\n")
    with pytest.raises(ValueError,
                       match=r"line 2: column 'param_value'.*'much'"):
        _read_rows(str(unparsable))


def test_fmt_forms():
    assert _fmt(None) == ""
    assert _fmt(True) == "True"
    assert _fmt(np.bool_(False)) == "False"
    assert _fmt(3) == "3"
    assert _fmt(np.int64(4)) == "4"
    assert _fmt(0.1) == "0.1"
    assert _fmt(np.float64(1 / 3)) == repr(1 / 3)
    assert _fmt("corsdice") == "corsdice"


# -- plotting ---------------------------------------------------------------------


def _assert_svg(path):
    assert os.path.exists(path)
    root = ET.parse(path).getroot()
    assert root.tag.endswith("svg")


def test_emit_plots_fig1(tmp_path):
    cfg = ExperimentConfig(output_dir=str(tmp_path), workers=1,
                           **GOLDEN_KWARGS)
    res = run_fig1_sweep(cfg)
    written = emit_plots(res.csv_path, "fig1")
    assert [Path(p).name for p in written] == [
        "fig1_sweep_return.svg", "fig1_sweep_viol_bf.svg",
        "fig1_sweep_viol_pc.svg"]
    for p in written:
        _assert_svg(p)


def test_emit_plots_ope(ope_result):
    written = emit_plots(ope_result.csv_path, "ope")
    assert [Path(p).name for p in written] == ["ope_compare_ope.svg"]
    _assert_svg(written[0])


def test_emit_plots_constrained(constrained_result):
    written = emit_plots(constrained_result.csv_path, "constrained")
    assert [Path(p).name for p in written] == [
        "constrained_feasibility.svg", "constrained_cost_scatter.svg"]
    for p in written:
        _assert_svg(p)


def test_emit_plots_empty_csv_and_unknown_kind(tmp_path):
    bare = tmp_path / "bare.csv"
    bare.write_text(",".join(CSV_COLUMNS) + "\n")
    for kind in ("fig1", "ope", "constrained"):
        for p in emit_plots(str(bare), kind):
            _assert_svg(p)
    with pytest.raises(ValueError, match="kind"):
        emit_plots(str(bare), "violin")
