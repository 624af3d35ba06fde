"""Command-line entry point: exit codes, declared outputs, determinism."""

from __future__ import annotations

import json

import numpy as np
import pandas as pd
import pytest

from mobidecomp import cli, synth
from mobidecomp.ingest import write_covariates

FIT_OUTPUTS = ("draws.csv", "sampler_stats.csv", "diagnostics.json", "params_layout.json")
SUMMARY_OUTPUTS = ("trajectories.csv", "reaction_strength.csv", "omega.csv", "lambda.csv", "summary.json")


def write_config(path, doc):
    path.write_text(json.dumps(doc))
    return path


def run(tmp_path, command, doc, name=None):
    cfg = write_config(tmp_path / f"{name or command}.json", doc)
    return cli.main([command, "--config", str(cfg)])


def read_error(capsys):
    lines = [ln for ln in capsys.readouterr().err.splitlines() if ln.startswith("{")]
    return json.loads(lines[-1])


def snapshot(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir()) if p.is_file()}


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    """Simulate a 2-district panel and fit it with a budget that converges."""
    root = tmp_path_factory.mktemp("cli")
    assert run(root, "simulate", {"seed": 3, "output_dir": "data", "simulate": {"n_districts": 2}}) == 0
    doc = {"seed": 3, "inputs": "data", "output_dir": "fit",
           "sampler": {"n_chains": 2, "n_tune": 300, "n_draws": 200}}  # fmt: skip
    code = run(root, "fit", doc)
    return root, code


# --- simulate / fit --------------------------------------------------------------------------


def test_simulate_writes_panel_and_is_idempotent(tmp_path):
    doc = {"seed": 1, "output_dir": "sim", "simulate": {"n_districts": 3}}
    assert run(tmp_path, "simulate", doc) == 0
    first = snapshot(tmp_path / "sim")
    assert {"panel_duration.csv", "truth.json", "covariates.csv", "calendar.csv"} <= set(first)
    assert run(tmp_path, "simulate", doc) == 0
    assert snapshot(tmp_path / "sim") == first


def test_fit_happy_path_writes_declared_outputs(fitted):
    root, code = fitted
    assert code == 0
    for name in FIT_OUTPUTS:
        assert (root / "fit" / name).is_file()
    diag = json.loads((root / "fit" / "diagnostics.json").read_text())
    assert diag["max_rhat"] < 1.07


def test_fit_missing_input_names_the_path(tmp_path, capsys):
    assert run(tmp_path, "simulate", {"output_dir": "data", "simulate": {"n_districts": 2}}) == 0
    (tmp_path / "data" / "tmax.csv").unlink()
    assert run(tmp_path, "fit", {"inputs": "data", "output_dir": "out"}) == 1
    assert str(tmp_path / "data" / "tmax.csv") in read_error(capsys)["message"]


def test_under_adapted_fit_exits_two_with_rhat_report(fitted, capsys):
    root, _ = fitted
    doc = {"seed": 3, "inputs": "data", "output_dir": "short",
           "sampler": {"n_chains": 4, "n_tune": 100, "n_draws": 20, "max_tree_depth": 3}}  # fmt: skip
    assert run(root, "fit", doc, "short") == 2
    err = read_error(capsys)
    assert err["error"] == "diagnostic-failure" and err["max_rhat"] >= 1.07
    assert all((root / "short" / n).is_file() for n in FIT_OUTPUTS)


def test_ten_tuning_steps_is_configuration_error(tmp_path, capsys):
    doc = {"inputs": "data", "output_dir": "out", "sampler": {"n_tune": 10}}
    assert run(tmp_path, "fit", doc) == 1
    assert "n_tune" in read_error(capsys)["message"]


def test_invalid_config_documents(tmp_path, capsys):
    assert cli.main(["fit", "--config", str(tmp_path / "absent.json")]) == 1
    assert run(tmp_path, "fit", {"output_dir": "o", "bogus": 1}) == 1
    assert "bogus" in read_error(capsys)["message"]
    assert run(tmp_path, "sem", {"output_dir": "o", "sem": {"n_boot": 10}}) == 1
    with pytest.raises(SystemExit):
        cli.main(["explode", "--config", "x.json"])


# --- summarize -----------------------------------------------------------------------------------


def test_summarize_without_draws_exits_one(tmp_path, capsys):
    doc = {"inputs": "data", "output_dir": "out", "draws_dir": "no_draws_here"}
    assert run(tmp_path, "summarize", doc) == 1
    assert read_error(capsys)["error"] == "missing-prerequisite"


def test_summarize_outputs_and_idempotence(fitted):
    root, _ = fitted
    doc = {"inputs": "data", "draws_dir": "fit", "output_dir": "summary",
           "summarize": {"impact_weeks": ["2020-04-19"]}}  # fmt: skip
    assert run(root, "summarize", doc) == 0
    first = snapshot(root / "summary")
    assert set(SUMMARY_OUTPUTS) <= set(first)
    traj = pd.read_csv(root / "summary" / "trajectories.csv", dtype={"district": str})
    assert list(traj.columns) == ["district", "week", "factor", "q025", "q50", "q975"]
    summary = json.loads(first["summary.json"])
    assert summary["impact"][0]["week_ending"] == "2020-04-19"
    assert run(root, "summarize", doc) == 0
    assert snapshot(root / "summary") == first


# --- regress / sem ------------------------------------------------------------------------------------


def planted_inputs(tmp_path, n=60, seed=0, peak_from_reaction=True):
    """Covariates plus an outcomes table driven by two planted covariates."""
    table = synth.synthetic_covariates(n, seed=seed)
    write_covariates(table, tmp_path / "covariates.csv")
    Z = (table.values - table.values.mean()) / table.values.std(ddof=1)
    rng = np.random.default_rng(seed)
    reaction = Z["income"] + Z["fdp"] + 0.2 * rng.standard_normal(n)
    peak = Z["cdu"] + 0.5 * rng.standard_normal(n)
    if not peak_from_reaction:
        # remove every trace of the reaction from the peak, so the fitted b path is exactly zero
        D = np.column_stack([np.ones(n), Z.to_numpy(), reaction])
        peak = peak - D @ np.linalg.lstsq(D, peak, rcond=None)[0] + 0.7 * Z["cdu"].to_numpy()
    out = pd.DataFrame({"ags": list(table.ags), "reaction_first": reaction, "reaction_second": reaction,
                        "peak_first": peak, "peak_second": peak})  # fmt: skip
    out.to_csv(tmp_path / "outcomes.csv", index=False)


def test_regress_recovers_planted_subset(tmp_path):
    planted_inputs(tmp_path)
    doc = {"covariates": "covariates.csv", "outcomes": "outcomes.csv", "output_dir": "reg",
           "regression": {"final_variables": "auto"}}  # fmt: skip
    assert run(tmp_path, "regress", doc) == 0
    best = pd.read_csv(tmp_path / "reg" / "best_subsets_first.csv")
    assert set(best.set_index("size").loc[2, "variables"].split(";")) == {"income", "fdp"}
    assert len(best) == 18  # 19 covariates without the 65+ share
    for wave in ("first", "second"):
        for stem in ("best_subsets", "criteria", "coefficients"):
            assert (tmp_path / "reg" / f"{stem}_{wave}.csv").is_file()
    report = json.loads((tmp_path / "reg" / "regression_report.json").read_text())
    assert report["waves"]["first"]["n_subsets"] == 2**18 - 1


def test_sem_with_null_mediator_path_has_total_equal_direct(tmp_path):
    planted_inputs(tmp_path, peak_from_reaction=False)
    doc = {"covariates": "covariates.csv", "outcomes": "outcomes.csv", "output_dir": "sem",
           "sem": {"variables": ["income", "fdp", "cdu"], "n_boot": 200}}  # fmt: skip
    assert run(tmp_path, "sem", doc) == 0
    for wave in ("first", "second"):
        table = pd.read_csv(tmp_path / "sem" / f"sem_{wave}.csv")
        np.testing.assert_allclose(table["b"], 0.0, atol=1e-10)
        np.testing.assert_allclose(table["total"], table["direct"], atol=1e-10)
    first = snapshot(tmp_path / "sem")
    assert run(tmp_path, "sem", doc) == 0
    assert snapshot(tmp_path / "sem") == first


def test_outputs_stay_inside_output_directory(tmp_path):
    planted_inputs(tmp_path)
    before = set(p.name for p in tmp_path.iterdir())
    doc = {"covariates": "covariates.csv", "outcomes": "outcomes.csv", "output_dir": "sem",
           "sem": {"variables": ["income"], "n_boot": 200}}  # fmt: skip
    assert run(tmp_path, "sem", doc) == 0
    assert set(p.name for p in tmp_path.iterdir()) - before == {"sem", "sem.json"}


def test_out_flag_overrides_configured_directory(tmp_path):
    cfg = write_config(tmp_path / "sim.json", {"seed": 1, "output_dir": "a", "simulate": {"n_districts": 2}})
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "b" / "truth.json").is_file() and not (tmp_path / "a").exists()
