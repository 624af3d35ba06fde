"""Batch command-line entry point: ``mobidecomp <command> --config run.json``.

Every command reads one JSON configuration document, writes CSV tables and
JSON reports into the output directory, and reports failures as JSON lines
on stderr. Exit codes: 0 on success, 1 on error, 2 when ``fit`` finishes but
a convergence diagnostic fails (its outputs are still written).

Configuration keys (all optional unless a command needs them)::

    {
      "seed": 0,
      "inputs": "data/",                       # directory or {"duration": ..., ...}
      "covariates": "data/covariates.csv",
      "outcomes": "outcomes.csv",              # bypasses draws for regress/sem
      "output_dir": "out/",
      "draws_dir": "out/",                     # defaults to the configured output_dir
      "sampler": {"n_chains": 4, "n_tune": 2000, "n_draws": 1000,
                  "max_tree_depth": 10, "target_accept": 0.8},
      "waves": {"first": [1, 13], "second": [27, 52]},
      "summarize": {"impact_weeks": ["2020-04-19"]},
      "regression": {"covariates": [...], "exclude": ["share_65plus"],
                     "final_variables": [...] | "auto"},
      "sem": {"variables": [...], "n_boot": 1000, "level": 0.95},
      "simulate": {"n_districts": 5, "scenario": "two-wave",
                   "temperature_amplitude": 10.0, "n_weeks": 52, "hypers": {...}},
      "sbc": {"n_replicates": 50, ...}
    }

Relative paths are resolved against the directory of the configuration file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import posterior, stats, synth
from .errors import ConfigurationError, MissingPrerequisiteError, MobidecompError, ParseError
from .ingest import (
    COVARIATES,
    DISTRICT_TYPES,
    StudyCalendar,
    load_covariates,
    load_panel,
    resolve_paths,
    write_covariates,
)
from .model import GlobalHypers, ParameterSpace
from .sampler import ChainConfig, PosteriorDraws, run

log = logging.getLogger("mobidecomp")

COMMANDS = ("fit", "summarize", "regress", "sem", "simulate", "sbc")

# union of the variables selected for either wave, without the 65+ share
FINAL_VARIABLES = (
    "population_density",
    "voter_turnout",
    "income",
    "childcare_under3",
    "cdu",
    "spd",
    "green_party",
    "fdp",
    "afd",
    "average_age",
    "unemployment_rate",
    "employment_rate",
    "agriculture_forestry_fisheries",
    "finance_sector",
)

_TOP_LEVEL = {"seed", "inputs", "covariates", "outcomes", "output_dir", "draws_dir", "sampler", "waves",
              "summarize", "regression", "sem", "simulate", "sbc"}  # fmt: skip
_SAMPLER_KEYS = {f.name for f in fields(ChainConfig)} - {"seed"}
_SBC_KEYS = {f.name for f in fields(synth.SBCConfig)} - {"seed", "workers"}
_SIMULATE_KEYS = {"n_districts", "scenario", "temperature_amplitude", "n_weeks", "hypers", "covariates"}


# --- configuration ---------------------------------------------------------------------


@dataclass
class RunConfig:
    """A validated run configuration with absolute paths."""

    output_dir: Path
    seed: int = 0
    inputs: dict | None = None
    covariates: Path | None = None
    outcomes: Path | None = None
    draws_dir: Path | None = None
    sampler: ChainConfig = field(default_factory=ChainConfig)
    waves: tuple = (posterior.FIRST_WAVE, posterior.SECOND_WAVE)
    impact_weeks: tuple = ()
    regression_covariates: tuple = COVARIATES
    exclude: tuple = ("share_65plus",)
    final_variables: tuple | str = FINAL_VARIABLES
    sem_variables: tuple | None = None
    n_boot: int = 1000
    level: float = 0.95
    simulate: dict = field(default_factory=dict)
    sbc: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path, output_dir: str | Path | None = None) -> "RunConfig":
        """Read and validate a configuration file; ``output_dir`` overrides its ``output_dir``."""
        path = Path(path)
        if not path.is_file():
            raise ParseError("configuration file not found", path=str(path))
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"invalid JSON ({exc})", path=str(path)) from None
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{path}: configuration must be a JSON object")
        return cls.from_dict(doc, path.parent, output_dir)

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str | Path = ".", output_dir: str | Path | None = None) -> "RunConfig":
        base = Path(base_dir)
        unknown = sorted(set(doc) - _TOP_LEVEL)
        if unknown:
            raise ConfigurationError(f"unknown configuration keys {unknown}")

        def resolve(value):
            return None if value is None else (base / value)

        if output_dir is not None:
            out = Path(output_dir)
        elif doc.get("output_dir") is not None:
            out = resolve(doc["output_dir"])
        else:
            raise ConfigurationError("no output directory: set output_dir or pass --out")
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigurationError(f"seed must be a non-negative integer, got {seed!r}")

        inputs = doc.get("inputs")
        if isinstance(inputs, str):
            inputs = {"dir": str(resolve(inputs))}
        elif isinstance(inputs, dict):
            inputs = {k: str(resolve(v)) for k, v in inputs.items() if v is not None}
        elif inputs is not None:
            raise ConfigurationError("inputs must be a directory path or a mapping of file paths")

        sampler = _section(doc, "sampler", _SAMPLER_KEYS)
        chain = ChainConfig(**sampler, seed=seed)

        waves = _waves(_section(doc, "waves", set(posterior.WAVES)))
        summ = _section(doc, "summarize", {"impact_weeks"})
        reg = _section(doc, "regression", {"covariates", "exclude", "final_variables"})
        sem = _section(doc, "sem", {"variables", "n_boot", "level"})
        covs = tuple(reg.get("covariates", COVARIATES))
        exclude = tuple(reg.get("exclude", ("share_65plus",)))
        final = reg.get("final_variables", FINAL_VARIABLES)
        if isinstance(final, str):
            if final != "auto":
                raise ConfigurationError('final_variables must be a list of covariates or "auto"')
        else:
            final = tuple(final)
            missing = sorted(set(final) - set(covs))
            if missing:
                raise ConfigurationError(f"final_variables {missing} are not among the regression covariates")
        sem_vars = tuple(sem["variables"]) if sem.get("variables") is not None else None
        if sem_vars is not None and sorted(set(sem_vars) - set(covs)):
            raise ConfigurationError(f"sem variables {sorted(set(sem_vars) - set(covs))} are not covariates")
        n_boot = sem.get("n_boot", 1000)
        if not isinstance(n_boot, int) or n_boot < 200:
            raise ConfigurationError(f"sem.n_boot must be an integer of at least 200, got {n_boot!r}")

        simulate = _section(doc, "simulate", _SIMULATE_KEYS)
        sbc = _section(doc, "sbc", _SBC_KEYS)
        return cls(
            output_dir=out,
            seed=seed,
            inputs=inputs,
            covariates=resolve(doc.get("covariates")),
            outcomes=resolve(doc.get("outcomes")),
            draws_dir=resolve(doc.get("draws_dir", doc.get("output_dir"))),
            sampler=chain,
            waves=waves,
            impact_weeks=tuple(summ.get("impact_weeks", ())),
            regression_covariates=covs,
            exclude=exclude,
            final_variables=final,
            sem_variables=sem_vars,
            n_boot=n_boot,
            level=float(sem.get("level", 0.95)),
            simulate=simulate,
            sbc=sbc,
        )

    # -- resolved inputs --

    def input_paths(self) -> dict:
        if self.inputs is None:
            raise ConfigurationError("this command needs 'inputs' (the panel CSV files)")
        return resolve_paths(self.inputs)

    def covariates_path(self) -> Path:
        if self.covariates is not None:
            return self.covariates
        paths = resolve_paths(self.inputs) if self.inputs is not None else {}
        if "covariates" not in paths:
            raise ConfigurationError("this command needs 'covariates' (the district covariate CSV)")
        return paths["covariates"]

    def draws_path(self) -> Path:
        return self.draws_dir if self.draws_dir is not None else self.output_dir


def _section(doc: dict, key: str, allowed: set) -> dict:
    value = doc.get(key, {}) or {}
    if not isinstance(value, dict):
        raise ConfigurationError(f"'{key}' must be a JSON object")
    unknown = sorted(set(value) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown keys in '{key}': {unknown}")
    return value


def _waves(spec: dict) -> tuple:
    n_weeks = StudyCalendar().n_weeks
    out = []
    for label, default in posterior.WAVES.items():
        first, last = spec.get(label, (default.first_week, default.last_week))
        if not (isinstance(first, int) and isinstance(last, int) and 1 <= first <= last <= n_weeks):
            raise ConfigurationError(f"wave '{label}' must be weeks [first, last] within 1..{n_weeks}")
        out.append(posterior.WaveWindow(label, first, last, float(first - 1), float(last)))
    return tuple(out)


# --- helpers ---------------------------------------------------------------------------------


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, allow_nan=False, default=_json_default) + "\n", encoding="utf-8")
    return path


def _json_default(v):
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v) if np.isfinite(v) else None
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _clean(obj):
    """Replace non-finite floats by ``None`` so reports are strict JSON."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    return obj


def _load_draws(config: RunConfig) -> PosteriorDraws:
    d = config.draws_path()
    needed = [d / "draws.csv", d / "sampler_stats.csv"]
    missing = [str(p) for p in needed if not p.is_file()]
    if missing:
        raise MissingPrerequisiteError(f"posterior draws not found ({', '.join(missing)}); run 'mobidecomp fit' first")
    return PosteriorDraws.read(d)


def _outcomes(config: RunConfig) -> pd.DataFrame:
    """Per-district reaction strength (posterior median) for each wave, indexed by district."""
    if config.outcomes is not None:
        if not config.outcomes.is_file():
            raise ParseError("outcomes file not found", path=str(config.outcomes))
        df = pd.read_csv(config.outcomes, dtype={"ags": str})
        need = ["ags"] + [f"reaction_{w.label}" for w in config.waves]
        missing = [c for c in need if c not in df.columns]
        if missing:
            raise ParseError(f"missing columns {missing}", path=str(config.outcomes), line=1)
        return df.set_index("ags").sort_index()
    rs = posterior.reaction_strengths(_load_draws(config), config.waves)
    wide = rs.pivot(index="district", columns="wave", values="median")
    out = pd.DataFrame({f"reaction_{w.label}": wide[w.label] for w in config.waves})
    out.index.name = "ags"
    return out.sort_index()


def _covariates(config: RunConfig, ags) -> tuple[pd.DataFrame, tuple]:
    table = load_covariates(config.covariates_path(), columns=config.regression_covariates).align(list(ags))
    return table.frame(), table.district_type


def _peaks(config: RunConfig, outcomes: pd.DataFrame) -> pd.DataFrame:
    cols = [f"peak_{w.label}" for w in config.waves]
    if all(c in outcomes.columns for c in cols):
        return outcomes[cols]
    panel = load_panel(config.input_paths())
    pos = [panel.ags.index(a) for a in outcomes.index if a in panel.ags]
    if len(pos) != len(outcomes):
        raise MissingPrerequisiteError("the panel lacks incidence for some districts with outcomes")
    inc = panel.incidence_local[pos]
    return pd.DataFrame({f"peak_{w.label}": stats.peak_incidence(inc, w) for w in config.waves},
                        index=outcomes.index)  # fmt: skip


# --- commands ---------------------------------------------------------------------------------


def cmd_fit(config: RunConfig) -> int:
    """Sample the posterior; writes draws, sampler statistics, diagnostics and the parameter layout."""
    panel = load_panel(config.input_paths())
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    draws, diagnostics = run(config.sampler, panel)
    draws.write(out, diagnostics)
    ParameterSpace(panel.ags).write_layout(out / "params_layout.json")
    if not diagnostics["converged"]:
        rhat = {k: v["rhat"] for k, v in diagnostics["parameters"].items() if k in diagnostics["flagged"]}
        _emit("diagnostic-failure", f"R-hat >= {diagnostics['rhat_threshold']} for {len(rhat)} parameters",
              max_rhat=diagnostics["max_rhat"], flagged=rhat)  # fmt: skip
        return 2
    return 0


def cmd_summarize(config: RunConfig) -> int:
    """Factor trajectories, reaction strengths, and local-weight / fatigue summaries."""
    draws = _load_draws(config)
    panel = load_panel(config.input_paths())
    district_type = None
    try:
        path = config.covariates_path()
    except ConfigurationError:
        path = None
    if path is not None and path.is_file():
        table = load_covariates(path, columns=()).align(list(panel.ags))
        district_type = dict(zip(table.ags, table.district_type))
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    traj = posterior.factor_trajectories(draws, panel)
    traj.write(out / "trajectories.csv")
    posterior.reaction_strengths(draws, config.waves).to_csv(out / "reaction_strength.csv", index=False)
    omega, omega_summary = posterior.local_weight_summary(draws, district_type)
    lam, lam_summary = posterior.fatigue_summary(draws, district_type)
    omega.to_csv(out / "omega.csv", index=False)
    lam.to_csv(out / "lambda.csv", index=False)
    impacts = [posterior.cross_district_impact(traj, w, "C") for w in config.impact_weeks]
    for item in impacts:
        item["week_ending"] = panel.calendar.week_ending(item["week"]).isoformat()
    _write_json(out / "summary.json", _clean({
        "waves": [{"label": w.label, "first_week": w.first_week, "last_week": w.last_week, "t0": w.t0, "t1": w.t1}
                  for w in config.waves],
        "impact": impacts,
        "omega": omega_summary,
        "lambda": lam_summary,
    }))  # fmt: skip
    return 0


def _regression_reports(config: RunConfig, cov: pd.DataFrame, outcomes: pd.DataFrame) -> dict:
    final = None if config.final_variables == "auto" else list(config.final_variables)
    reports = {}
    for w in config.waves:
        y = outcomes[f"reaction_{w.label}"].to_numpy()
        reports[w.label] = stats.regression_report(cov, y, f"reaction_{w.label}", config.exclude, final)
    if final is None:
        union = stats.union_of_selected(list(reports.values()), config.exclude)
        for w in config.waves:
            y = outcomes[f"reaction_{w.label}"].to_numpy()
            reports[w.label] = stats.regression_report(cov, y, f"reaction_{w.label}", config.exclude, union)
    return reports


def cmd_regress(config: RunConfig) -> int:
    """Best-subset search, selection criteria and final coefficient tables for both waves."""
    outcomes = _outcomes(config)
    cov, types = _covariates(config, outcomes.index)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    reports = _regression_reports(config, cov, outcomes)
    tests = {}
    for w in config.waves:
        label = w.label
        rep = reports[label]
        rows = [{"size": int(s), "variables": ";".join(v)} for s, v in rep["best_subsets"].items()]
        pd.DataFrame(rows, columns=["size", "variables"]).to_csv(out / f"best_subsets_{label}.csv", index=False)
        crit_cols = ["size", "variables", "r2", "adj_r2", "pred_r2", "cp", "aic", "bic", "p"]
        pd.DataFrame(rep["criteria"], columns=crit_cols).to_csv(out / f"criteria_{label}.csv", index=False)
        coef_cols = ["variable", "coefficient", "std_error", "t", "p_value"]
        pd.DataFrame(rep["final_model"]["coefficients"], columns=coef_cols).to_csv(
            out / f"coefficients_{label}.csv", index=False
        )
        tests[label] = stats.group_t_tests(outcomes[f"reaction_{label}"].to_numpy(), types, DISTRICT_TYPES)
    table = outcomes.reset_index()
    table.to_csv(out / "outcomes.csv", index=False)
    _write_json(out / "regression_report.json", _clean({"waves": reports, "district_type_tests": tests}))
    return 0


def cmd_sem(config: RunConfig) -> int:
    """Mediation model per wave: covariates to reaction strength to peak incidence."""
    outcomes = _outcomes(config)
    if config.sem_variables is not None:
        variables = list(config.sem_variables)
    elif config.final_variables != "auto":
        variables = list(config.final_variables)
    else:
        variables = [c for c in config.regression_covariates if c not in config.exclude]
    cov, _ = _covariates(config, outcomes.index)
    peaks = _peaks(config, outcomes)
    X = stats.standardize(cov[variables])
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    reports = {}
    for w in config.waves:
        z = stats.standardize(pd.DataFrame({"m": outcomes[f"reaction_{w.label}"].to_numpy(),
                                            "y": peaks[f"peak_{w.label}"].to_numpy()}))  # fmt: skip
        fit = stats.mediation_sem(X, z["m"].to_numpy(), z["y"].to_numpy(), n_boot=config.n_boot,
                                  seed=config.seed, level=config.level)  # fmt: skip
        reports[w.label] = fit.report()
        rows = []
        for r in reports[w.label]["paths"]:
            row = {"variable": r["variable"]}
            for col in ("a", "b", "direct", "indirect", "total"):
                row[col] = r[col]
                row[f"{col}_lower"], row[f"{col}_upper"] = r[f"{col}_ci"]
            rows.append(row)
        pd.DataFrame(rows).to_csv(out / f"sem_{w.label}.csv", index=False)
    _write_json(out / "sem_report.json", _clean({"variables": variables, "waves": reports}))
    return 0


def cmd_simulate(config: RunConfig) -> int:
    """Synthetic panel, covariates and generating parameters."""
    sim = dict(config.simulate)
    hypers = GlobalHypers.typical().as_dict()
    overrides = sim.pop("hypers", {}) or {}
    unknown = sorted(set(overrides) - set(hypers))
    if unknown:
        raise ConfigurationError(f"unknown hyperparameters {unknown}")
    hypers.update({k: float(v) for k, v in overrides.items()})
    truth = synth.simulate_panel(
        hypers=GlobalHypers.from_dict(hypers),
        n_districts=int(sim.get("n_districts", 5)),
        seed=config.seed,
        incidence_scenario_name=sim.get("scenario", "two-wave"),
        temperature_amplitude=float(sim.get("temperature_amplitude", 10.0)),
        n_weeks=int(sim.get("n_weeks", 52)),
    )
    out = config.output_dir
    truth.write(out)
    if sim.get("covariates", True):
        write_covariates(synth.synthetic_covariates(truth.panel.n_districts, seed=config.seed), out / "covariates.csv")
    return 0


def cmd_sbc(config: RunConfig) -> int:
    """Simulation-based calibration of the sampler on synthetic panels."""
    sbc = dict(config.sbc)
    if "params" in sbc:
        sbc["params"] = tuple(sbc["params"])
    result = synth.sbc(synth.SBCConfig(**sbc, seed=config.seed))
    result.write(config.output_dir)
    return 0


_DISPATCH = {
    "fit": cmd_fit,
    "summarize": cmd_summarize,
    "regress": cmd_regress,
    "sem": cmd_sem,
    "simulate": cmd_simulate,
    "sbc": cmd_sbc,
}


# --- entry point ------------------------------------------------------------------------------


def _emit(code: str, message: str, **extra) -> None:
    print(json.dumps({"error": code, "message": message, **_clean(extra)}), file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mobidecomp",
        description="Decompose district mobility into multiplicative factors and analyse the reaction to incidence.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, type=Path, help="JSON run configuration")
    parser.add_argument("--out", type=Path, default=None, help="output directory (overrides output_dir)")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress (-vv for debug)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        config = RunConfig.load(args.config, args.out)
        return _DISPATCH[args.command](config)
    except MobidecompError as exc:
        _emit(exc.code, str(exc))
    except (OSError, ValueError) as exc:
        _emit("error", str(exc))
    return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
