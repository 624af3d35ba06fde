"""Forward simulation from known parameters, simulation-based calibration, and planted datasets.

Incidence is an exogenous scenario rather than the output of a transmission
model. Calendars (school vacations and public holidays) are synthetic but
follow a plausible German school year shifted per district.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from . import model as M
from .errors import AdaptationFailure, ConfigurationError, EvaluationError
from .ingest import COVARIATES, DISTRICT_TYPES, CovariateTable, District, StudyCalendar, WeeklyPanel, write_panel

log = logging.getLogger(__name__)

SCENARIOS = ("two-wave", "flat", "zero")
TRUNCATION_FLOOR = 0.05  # hours/day, used only if repeated redraws stay non-positive
MAX_REDRAWS = 100
MAX_PRIOR_REDRAWS = 1000  # per SBC replicate


@dataclass(frozen=True)
class SyntheticTruth:
    """A simulated panel together with the parameters that generated it."""

    hypers: M.GlobalHypers
    offsets: np.ndarray  # (n_districts, 10)
    panel: WeeklyPanel
    seed: int | list
    scenario: str = "two-wave"
    n_truncated: int = 0

    @property
    def space(self) -> M.ParameterSpace:
        return M.ParameterSpace(self.panel.ags)

    def unconstrained(self) -> np.ndarray:
        return self.space.to_unconstrained(self.hypers, self.offsets)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "scenario": self.scenario,
            "hypers": self.hypers.as_dict(),
            "offsets": {
                a: dict(zip(M.OFFSETS, map(float, row))) for a, row in zip(self.panel.ags, self.offsets)
            },
            "n_truncated": self.n_truncated,
        }

    def write(self, directory: str | Path) -> dict[str, Path]:
        """Write ``truth.json`` and the standard panel CSVs into ``directory``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = write_panel(self.panel, directory)
        paths["truth"] = directory / "truth.json"
        paths["truth"].write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        return paths


# --- exogenous inputs ------------------------------------------------------------------


def incidence_scenario(scenario: str, n_districts: int, n_weeks: int, rng: np.random.Generator):
    """Weekly cases per 100k, local ``(D, T)`` and national ``(T,)``.

    ``two-wave`` has a spring peak around week 6 and a larger winter peak
    around week 42; districts scale and shift the national curve slightly.
    """
    if scenario not in SCENARIOS:
        raise ConfigurationError(f"unknown incidence scenario {scenario!r}; expected one of {SCENARIOS}")
    t = np.arange(n_weeks, dtype=float)
    if scenario == "zero":
        return np.zeros((n_districts, n_weeks)), np.zeros(n_weeks)
    if scenario == "flat":
        national = np.full(n_weeks, 50.0)
        scale = rng.lognormal(0.0, 0.3, size=(n_districts, 1))
        return national * scale, national
    national = 40.0 * np.exp(-0.5 * ((t - 5.0) / 2.5) ** 2) + 170.0 * np.exp(-0.5 * ((t - 41.0) / 5.0) ** 2) + 2.0
    scale = rng.lognormal(0.0, 0.4, size=(n_districts, 1))
    shift = rng.normal(0.0, 1.0, size=(n_districts, 1))
    local = np.stack([np.interp(t - s, t, national) for s in shift[:, 0]]) * scale
    return local, national


def temperature_series(n_districts: int, n_weeks: int, rng: np.random.Generator, amplitude: float = 10.0,
                       mean: float = 14.0, peak_week: float = 19.0) -> np.ndarray:  # fmt: skip
    """Weekly mean daily maximum temperature: a yearly sinusoid plus district offsets and noise."""
    t = np.arange(n_weeks, dtype=float)
    base = mean + amplitude * np.cos(2.0 * math.pi * (t - peak_week) / 52.0)
    offsets = rng.normal(0.0, 1.0, size=(n_districts, 1))
    return base + offsets + rng.normal(0.0, 1.5, size=(n_districts, n_weeks))


# weeks (0-based) carrying weekday public holidays, with counts
_HOLIDAYS = {4: 1, 5: 1, 7: 1, 11: 1, 13: 1, 29: 1, 41: 2, 42: 1}


def synthetic_calendar(n_districts: int, n_weeks: int, rng: np.random.Generator):
    """School-vacation weekday counts and public-holiday counts, each ``(D, T)`` in 0..5."""
    vacation = np.zeros((n_districts, n_weeks), dtype=int)
    holidays = np.zeros((n_districts, n_weeks), dtype=int)
    for d in range(n_districts):
        summer = int(rng.integers(14, 22))
        blocks = [(4, 2), (summer, 6), (summer + 12, 2), (41, 2)]
        for start, length in blocks:
            stop = min(start + length, n_weeks)
            vacation[d, start:stop] = 5
        for w, c in _HOLIDAYS.items():
            if w < n_weeks:
                holidays[d, w] = c
    # holidays are not school days counted twice
    vacation = np.minimum(vacation, 5 - holidays)
    return vacation, holidays


def district_keys(n: int) -> list[str]:
    return [f"{9000 + i:05d}" for i in range(n)]


# --- forward simulation ----------------------------------------------------------------


def _draw_durations(mean: np.ndarray, sigma: float, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    y = mean + sigma * rng.standard_t(M.STUDENT_T_DF, size=mean.shape)
    bad = ~(y > 0)
    n_bad = int(bad.sum())
    for _ in range(MAX_REDRAWS):
        if not bad.any():
            break
        y[bad] = mean[bad] + sigma * rng.standard_t(M.STUDENT_T_DF, size=int(bad.sum()))
        bad = ~(y > 0)
    y[bad] = TRUNCATION_FLOOR
    return y, n_bad


def simulate_panel(hypers: M.GlobalHypers | None = None, n_districts: int = 5, seed=0,
                   incidence_scenario_name: str = "two-wave", temperature_amplitude: float = 10.0,
                   n_weeks: int = 52, offsets=None) -> SyntheticTruth:  # fmt: skip
    """Simulate a panel from the multiplicative model with Student-t noise.

    Parameters
    ----------
    hypers : GlobalHypers, optional
        Defaults to :meth:`GlobalHypers.typical`.
    n_districts : int
    seed : int or sequence of int
        Fully determines the result.
    incidence_scenario_name : {"two-wave", "flat", "zero"}
    temperature_amplitude : float
        Amplitude of the yearly temperature sinusoid, degrees Celsius.
    offsets : array_like, optional
        District offsets ``(n_districts, 10)``; drawn from N(0, 1) when omitted.

    Notes
    -----
    Non-positive durations are redrawn (a truncated likelihood), which the
    fitted model ignores; the number of affected cells is reported in
    ``n_truncated``.
    """
    if n_districts < 1:
        raise ConfigurationError("n_districts must be at least 1")
    if incidence_scenario_name not in SCENARIOS:
        raise ConfigurationError(
            f"unknown incidence scenario {incidence_scenario_name!r}; expected one of {SCENARIOS}"
        )
    hypers = M.GlobalHypers.typical() if hypers is None else hypers
    rng = np.random.default_rng(seed)
    if offsets is None:
        offsets = rng.standard_normal((n_districts, len(M.OFFSETS)))
    offsets = np.asarray(offsets, dtype=float).reshape(n_districts, len(M.OFFSETS))
    local, national = incidence_scenario(incidence_scenario_name, n_districts, n_weeks, rng)
    tmax = temperature_series(n_districts, n_weeks, rng, amplitude=temperature_amplitude)
    vacation, holidays = synthetic_calendar(n_districts, n_weeks, rng)
    calendar = StudyCalendar(n_weeks=n_weeks)
    districts = tuple(District(a, f"synthetic {a}") for a in district_keys(n_districts))
    kwargs = dict(districts=districts, incidence_local=local, incidence_national=national, tmax=tmax,
                  vacation_days=vacation, holiday_count=holidays, calendar=calendar)  # fmt: skip
    placeholder = WeeklyPanel(duration=np.ones((n_districts, n_weeks)), **kwargs)
    space = M.ParameterSpace(placeholder.ags)
    x = space.to_unconstrained(hypers, offsets)
    mean = M.PosteriorModel(placeholder).predict(x)
    duration, n_bad = _draw_durations(mean, hypers.sigma_L, rng)
    panel = WeeklyPanel(duration=duration, **kwargs)
    seed_repr = seed if isinstance(seed, (int, np.integer)) else [int(s) for s in np.atleast_1d(seed)]
    return SyntheticTruth(hypers, offsets, panel, seed_repr, incidence_scenario_name, n_bad)


# --- simulation-based calibration --------------------------------------------------------


@dataclass(frozen=True)
class SBCConfig:
    """Settings for simulation-based calibration of the full pipeline.

    ``likelihood_scale`` deliberately mis-specifies the fitted likelihood
    (1.0 means correct) and exists for fault-injection checks.
    """

    n_replicates: int = 50
    n_districts: int = 2
    n_tune: int = 500
    n_draws: int = 250
    n_chains: int = 2
    n_ranks: int = 63
    n_bins: int = 20
    alpha: float = 0.01
    max_failure_fraction: float = 0.1
    scenario: str = "two-wave"
    likelihood_scale: float = 1.0
    max_tree_depth: int = 10
    seed: int = 0
    workers: int | None = None
    params: tuple = field(default_factory=lambda: tuple(M.GLOBAL_NAMES))

    def __post_init__(self):
        if self.n_replicates < 50:
            raise ConfigurationError(f"n_replicates must be at least 50, got {self.n_replicates}")
        if self.scenario not in SCENARIOS:
            raise ConfigurationError(f"unknown incidence scenario {self.scenario!r}")
        if self.n_chains * self.n_draws < self.n_ranks:
            raise ConfigurationError("fewer post-warmup draws than requested ranks")
        unknown = set(self.params) - set(M.GLOBAL_NAMES)
        if unknown:
            raise ConfigurationError(f"unknown parameters {sorted(unknown)}")


def thin_indices(n: int, k: int) -> np.ndarray:
    """``k`` evenly spaced indices into ``range(n)``."""
    return np.unique(np.round(np.linspace(0, n - 1, k)).astype(int))


def rank_statistic(truth: float, draws) -> int:
    """Number of draws strictly below ``truth`` (ties split deterministically by count)."""
    return int(np.sum(np.asarray(draws) < truth))


def rank_bin_probabilities(n_ranks: int, n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Map ranks 0..n_ranks onto bins and give each bin's probability under uniform ranks."""
    ranks = np.arange(n_ranks + 1)
    bins = ranks * n_bins // (n_ranks + 1)
    probs = np.bincount(bins, minlength=n_bins) / (n_ranks + 1)
    return bins, probs


def rank_uniformity_test(ranks, n_ranks: int, n_bins: int = 20) -> tuple[float, float]:
    """Chi-square statistic and p-value of binned ranks against the uniform distribution."""
    bins, probs = rank_bin_probabilities(n_ranks, n_bins)
    r = np.asarray(ranks, dtype=int)
    counts = np.bincount(bins[r], minlength=n_bins)
    expected = probs * r.size
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    return chi2, float(stats.chi2.sf(chi2, n_bins - 1))


def replicate_seed(seed: int, replicate: int) -> np.random.SeedSequence:
    """Seed for one replicate that depends only on (seed, replicate), not on scheduling."""
    return np.random.SeedSequence(seed, spawn_key=(replicate,))


def _sbc_replicate(args) -> dict:
    from .sampler import ChainConfig, run

    cfg, r = args
    # Prior draws whose panel needed any redraw of a non-positive duration are
    # discarded and drawn again. The rejection depends on the data alone, so
    # the posterior given an accepted panel is unchanged and ranks stay uniform;
    # keeping truncated panels would fit an untruncated likelihood to them.
    for attempt, ss in enumerate(replicate_seed(cfg.seed, r).spawn(MAX_PRIOR_REDRAWS)):
        prior_ss, sim_ss, fit_ss = ss.spawn(3)
        hypers = M.sample_prior_hypers(np.random.default_rng(prior_ss))
        sim_seed = [int(v) for v in sim_ss.generate_state(4)]
        truth = simulate_panel(hypers, cfg.n_districts, sim_seed, cfg.scenario)
        if truth.n_truncated == 0:
            break
    else:
        return {"replicate": r, "failed": True,
                "error": f"no prior draw in {MAX_PRIOR_REDRAWS} gave positive durations"}  # fmt: skip
    chain_cfg = ChainConfig(n_chains=cfg.n_chains, n_tune=cfg.n_tune, n_draws=cfg.n_draws,
                            max_tree_depth=cfg.max_tree_depth, seed=int(fit_ss.generate_state(1)[0]))  # fmt: skip
    try:
        draws, diag = run(chain_cfg, truth.panel, likelihood_scale=cfg.likelihood_scale, workers=1)
    except (AdaptationFailure, EvaluationError) as exc:
        return {"replicate": r, "failed": True, "error": str(exc)}
    keep = thin_indices(cfg.n_chains * cfg.n_draws, cfg.n_ranks)
    flat = draws.flat()[keep]
    n_glob = M.ParameterSpace.n_globals
    constrained = M._constrain(flat[:, :n_glob])
    true_v = hypers.as_array()
    ranks = {n: rank_statistic(true_v[i], constrained[:, i]) for i, n in enumerate(M.GLOBAL_NAMES)}
    return {
        "replicate": r,
        "failed": False,
        "ranks": ranks,
        "divergences": diag["divergences"],
        "max_rhat": diag["max_rhat"],
        "prior_redraws": attempt,
    }


@dataclass
class SBCResult:
    config: SBCConfig
    ranks: pd.DataFrame  # one row per successful replicate, one column per global
    failures: list
    tests: dict  # param -> {"chi2", "p_value", "rejected"}

    @property
    def fraction_not_rejected(self) -> float:
        kept = [self.tests[p] for p in self.config.params]
        return sum(not t["rejected"] for t in kept) / len(kept)

    def report(self) -> dict:
        return {
            "n_replicates": self.config.n_replicates,
            "n_failed": len(self.failures),
            "n_ranks": self.config.n_ranks,
            "n_bins": self.config.n_bins,
            "alpha": self.config.alpha,
            "likelihood_scale": self.config.likelihood_scale,
            "fraction_not_rejected": self.fraction_not_rejected,
            "tests": self.tests,
            "failures": self.failures,
        }

    def write(self, directory: str | Path) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {"ranks": directory / "sbc_ranks.csv", "report": directory / "sbc_report.json"}
        self.ranks.to_csv(paths["ranks"], index=False)
        paths["report"].write_text(json.dumps(self.report(), indent=2) + "\n", encoding="utf-8")
        return paths


def sbc(config: SBCConfig) -> SBCResult:
    """Simulation-based calibration: prior draw, simulate, fit, rank the truth among thinned draws.

    Prior draws whose simulated panel contains a non-positive duration are
    replaced by fresh draws (``prior_redraws`` in the rank table counts them),
    so every fitted panel comes from the untruncated model likelihood.

    Raises
    ------
    AdaptationFailure
        If more than ``max_failure_fraction`` of the replicates fail.
    """
    from .sampler import worker_count

    jobs = [(config, r) for r in range(config.n_replicates)]
    workers = worker_count(config.n_replicates) if config.workers is None else max(1, config.workers)
    if workers == 1:
        results = []
        for j in jobs:
            results.append(_sbc_replicate(j))
            log.info("sbc replicate %d/%d done", j[1] + 1, config.n_replicates)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sbc_replicate, jobs))
    failures = [{"replicate": r["replicate"], "error": r["error"]} for r in results if r["failed"]]
    if len(failures) > config.max_failure_fraction * config.n_replicates:
        raise AdaptationFailure(f"{len(failures)} of {config.n_replicates} SBC replicates failed")
    ok = [r for r in results if not r["failed"]]
    ranks = pd.DataFrame(
        [{"replicate": r["replicate"], **r["ranks"], "divergences": r["divergences"],
          "max_rhat": r["max_rhat"], "prior_redraws": r["prior_redraws"]} for r in ok]
    )  # fmt: skip
    tests = {}
    for p in config.params:
        chi2, pv = rank_uniformity_test(ranks[p].to_numpy(), config.n_ranks, config.n_bins)
        tests[p] = {"chi2": chi2, "p_value": pv, "rejected": bool(pv < config.alpha)}
    return SBCResult(config, ranks, failures, tests)


# --- planted downstream datasets ----------------------------------------------------------


def synthetic_covariates(n_districts: int, seed=0, names=COVARIATES) -> CovariateTable:
    """Correlated covariates with a district typology; values are arbitrary but plausible in scale."""
    rng = np.random.default_rng(seed)
    k = len(names)
    latent = rng.standard_normal((n_districts, 3))
    loadings = rng.normal(0.0, 0.6, size=(3, k))
    values = latent @ loadings + rng.standard_normal((n_districts, k))
    ags = district_keys(n_districts)
    frame = pd.DataFrame(np.clip(values * 10.0 + 50.0, 0.5, 99.5), columns=list(names), index=ags)
    types = np.array(DISTRICT_TYPES)[rng.integers(0, len(DISTRICT_TYPES), n_districts)]
    return CovariateTable(ags=tuple(ags), values=frame, district_type=tuple(types))


def planted_regression(n: int = 400, k: int = 19, support=(2, 5), snr: float = 10.0, seed=0):
    """Gaussian design ``(n, k)`` and response driven by ``support`` columns.

    The noise standard deviation is chosen so that var(signal) / var(noise) = ``snr``.
    Returns ``(X, y, beta)``.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, k))
    beta = np.zeros(k)
    beta[list(support)] = 1.0
    signal = X @ beta
    noise_sd = math.sqrt(np.var(signal) / snr)
    y = signal + noise_sd * rng.standard_normal(n)
    return X, y, beta


def planted_mediation(n: int = 200, a: float = 0.5, b: float = 0.8, c: float = 0.2, noise: float = 0.0, seed=0):
    """Single-covariate path data ``m = a x + e_m``, ``y = c x + b m + e_y``.

    In the noiseless case a mediator exactly proportional to ``x`` makes the
    outcome stage collinear, so ``e_m`` is a fixed residual orthogonal to
    ``x`` and the intercept; it leaves the stage-one slope exactly ``a``.
    Returns ``(x, m, y)`` as 1-D arrays.
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x = (x - x.mean()) / x.std(ddof=1)
    e = rng.standard_normal(n)
    basis = np.column_stack([np.ones(n), x])
    e = e - basis @ np.linalg.lstsq(basis, e, rcond=None)[0]
    e *= 0.5 / e.std(ddof=1)
    m = a * x + e
    y = c * x + b * m
    if noise > 0:
        m = m + noise * rng.standard_normal(n)
        y = y + noise * rng.standard_normal(n)
    return x, m, y
