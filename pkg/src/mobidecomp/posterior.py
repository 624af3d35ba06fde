"""Summaries of posterior draws: factor trajectories, reaction strengths, local-incidence weights.

All summaries are computed per draw first and summarized afterwards, so a
reported median is the median of the per-draw quantity.
"""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from . import model as M
from .errors import RangeError
from .ingest import WeeklyPanel
from .sampler import PosteriorDraws

FACTORS = ("C", "W", "V", "H")
QUANTILES = (0.025, 0.5, 0.975)


@dataclass(frozen=True)
class WaveWindow:
    """A wave as a span of study weeks plus the continuous time span used for integrals.

    ``first_week``/``last_week`` are 1-based and inclusive; ``t0``/``t1`` are
    in weeks since the start of the study.
    """

    label: str
    first_week: int
    last_week: int
    t0: float
    t1: float

    def __post_init__(self):
        if not 1 <= self.first_week <= self.last_week:
            raise RangeError(f"invalid week range {self.first_week}..{self.last_week}")
        if not 0 <= self.t0 < self.t1:
            raise RangeError(f"invalid integration span [{self.t0}, {self.t1}]")

    @property
    def weeks(self) -> np.ndarray:
        return np.arange(self.first_week, self.last_week + 1)


FIRST_WAVE = WaveWindow("first", 1, 13, 0.0, 13.0)
SECOND_WAVE = WaveWindow("second", 27, 52, 26.0, 52.0)
WAVES = {"first": FIRST_WAVE, "second": SECOND_WAVE}


def wave(window: WaveWindow | str) -> WaveWindow:
    if isinstance(window, WaveWindow):
        return window
    try:
        return WAVES[window]
    except KeyError:
        raise RangeError(f"unknown wave {window!r}; expected one of {sorted(WAVES)}") from None


# --- per-draw parameters ---------------------------------------------------------------


def _check_space(draws: PosteriorDraws, panel_or_ags) -> M.ParameterSpace:
    ags = panel_or_ags.ags if isinstance(panel_or_ags, WeeklyPanel) else tuple(panel_or_ags)
    space = M.ParameterSpace(ags)
    if tuple(draws.names) != space.names:
        raise ValueError("draws do not match the parameter layout of these districts")
    return space


def _districts_from_names(names) -> tuple[str, ...]:
    prefix = M.OFFSETS[0] + "["
    return tuple(n[len(prefix) : -1] for n in names if n.startswith(prefix))


def district_draws(draws: PosteriorDraws) -> dict:
    """Constrained district parameters per pooled draw, each ``(n_draws_total, D)``."""
    space = M.ParameterSpace(_districts_from_names(draws.names))
    if tuple(draws.names) != space.names:
        raise ValueError("draws do not follow the model's parameter layout")
    return M.district_params(draws.flat(), space)


# --- factor trajectories -------------------------------------------------------------


@dataclass(frozen=True)
class FactorTrajectory:
    """Pointwise 2.5/50/97.5 percentiles of each multiplicative factor.

    ``values`` has shape ``(len(factors), n_districts, n_weeks, 3)``.
    """

    ags: tuple
    factors: tuple
    values: np.ndarray
    calendar: object = None

    @property
    def n_weeks(self) -> int:
        return self.values.shape[2]

    def get(self, factor: str, district: str | int | None = None) -> np.ndarray:
        arr = self.values[self.factors.index(factor)]
        if district is None:
            return arr
        d = self.ags.index(district) if isinstance(district, str) else int(district)
        return arr[d]

    def frame(self) -> pd.DataFrame:
        F, D, T, _ = self.values.shape
        return pd.DataFrame(
            {
                "district": np.tile(np.repeat(np.array(self.ags, dtype=object), T), F),
                "week": np.tile(np.arange(1, T + 1), F * D),
                "factor": np.repeat(np.array(self.factors, dtype=object), D * T),
                "q025": self.values[..., 0].ravel(),
                "q50": self.values[..., 1].ravel(),
                "q975": self.values[..., 2].ravel(),
            }
        )

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        self.frame().to_csv(path, index=False)
        return path


def _slice_data(data: M.ModelData, idx) -> M.ModelData:
    return M.ModelData(
        observed=data.observed[idx],
        tmax=data.tmax[idx],
        vacation_days=data.vacation_days[idx],
        holiday_count=data.holiday_count[idx],
        local_lagged=data.local_lagged[idx],
        national_lagged=data.national_lagged,
        weeks=data.weeks,
        kernel_lags=data.kernel_lags,
    )


def factor_trajectories(draws: PosteriorDraws, panel: WeeklyPanel, max_cells: int = 4_000_000) -> FactorTrajectory:
    """Evaluate W, V, H, C for every draw and summarize pointwise.

    Districts are processed in blocks so that at most ``max_cells``
    draw-district-week cells are held at once per factor.
    """
    space = _check_space(draws, panel)
    x = draws.flat()
    if x.shape[0] == 0:
        raise ValueError("no draws to summarize")
    data = M.ModelData.from_panel(panel)
    v = M._constrain(space.globals_of(x))
    P = M.district_matrix(v, space.offsets(x))  # (S, D, 10)
    S, D = P.shape[:2]
    T = panel.n_weeks
    block = max(1, max_cells // max(S * T * (data.kernel_lags + 1), 1))
    out = np.empty((len(FACTORS), D, T, len(QUANTILES)))
    for start in range(0, D, block):
        idx = slice(start, min(start + block, D))
        f = M.factors_from(v, P[:, idx], _slice_data(data, idx))
        for i, name in enumerate(FACTORS):
            vals = np.broadcast_to(f[name], (S,) + f[name].shape[-2:])
            out[i, idx] = np.moveaxis(np.quantile(vals, QUANTILES, axis=0), 0, -1)
    return FactorTrajectory(tuple(panel.ags), FACTORS, out, panel.calendar)


def _week_position(traj: FactorTrajectory, week) -> int:
    if isinstance(week, (dt.date, str)):
        if traj.calendar is None:
            raise RangeError("trajectories carry no calendar to resolve a date")
        try:
            date = dt.date.fromisoformat(week) if isinstance(week, str) else week
        except ValueError as exc:
            raise RangeError(f"cannot read week-ending date {week!r}") from exc
        week = traj.calendar.week_index(date)
    week = int(week)
    if not 1 <= week <= traj.n_weeks:
        raise RangeError(f"week {week} is outside 1..{traj.n_weeks}")
    return week - 1


def cross_district_impact(traj: FactorTrajectory, week, factor: str = "C") -> dict:
    """Median and quartiles over districts of each district's median factor in ``week``.

    ``week`` is a 1-based index or a week-ending date.
    """
    t = _week_position(traj, week)
    medians = traj.get(factor)[:, t, 1]
    q25, q50, q75 = np.quantile(medians, [0.25, 0.5, 0.75])
    return {"factor": factor, "week": t + 1, "median": float(q50), "q25": float(q25), "q75": float(q75),
            "n_districts": int(medians.size)}  # fmt: skip


# --- reaction strength -----------------------------------------------------------------


def reaction_integral(kappa, lam, t0: float, t1: float):
    """Integral of ``kappa * exp(-t / lam)`` over ``[t0, t1]``.

    Evaluated as ``-kappa * lam * exp(-t0/lam) * expm1(-(t1-t0)/lam)``, which
    stays accurate for large ``lam``; ``lam = inf`` gives ``kappa * (t1 - t0)``.
    """
    kappa = np.asarray(kappa, dtype=float)
    lam = np.asarray(lam, dtype=float)
    width = float(t1) - float(t0)
    with np.errstate(invalid="ignore", over="ignore"):
        finite = -kappa * lam * np.exp(-float(t0) / lam) * np.expm1(-width / lam)
    out = np.where(np.isinf(lam), kappa * width, finite)
    return out if out.ndim else float(out)


def _summary(values) -> dict:
    q25, q50, q75 = np.quantile(np.asarray(values, dtype=float), [0.25, 0.5, 0.75])
    return {"median": float(q50), "q25": float(q25), "q75": float(q75)}


def reaction_strength(draws: PosteriorDraws, district: str | int, window: WaveWindow | str = FIRST_WAVE) -> dict:
    """Posterior median and quartiles of one district's reaction strength in a wave."""
    w = wave(window)
    p = district_draws(draws)
    ags = _districts_from_names(draws.names)
    d = ags.index(district) if isinstance(district, str) else int(district)
    values = reaction_integral(p["kappa_C"][:, d], p["lambda_C"][:, d], w.t0, w.t1)
    return {"district": ags[d], "wave": w.label, **_summary(values)}


def reaction_strengths(draws: PosteriorDraws, windows=(FIRST_WAVE, SECOND_WAVE)) -> pd.DataFrame:
    """Reaction-strength summaries for every district and wave."""
    p = district_draws(draws)
    ags = _districts_from_names(draws.names)
    rows = []
    for w in map(wave, windows):
        values = reaction_integral(p["kappa_C"], p["lambda_C"], w.t0, w.t1)
        q25, q50, q75 = np.quantile(values, [0.25, 0.5, 0.75], axis=0)
        for d, a in enumerate(ags):
            rows.append({"district": a, "wave": w.label, "median": q50[d], "q25": q25[d], "q75": q75[d]})
    return pd.DataFrame(rows, columns=["district", "wave", "median", "q25", "q75"])


# --- local weight and fatigue --------------------------------------------------------------


def _per_district(draws: PosteriorDraws, name: str, label: str, district_type=None) -> tuple[pd.DataFrame, dict]:
    p = district_draws(draws)
    ags = _districts_from_names(draws.names)
    q25, q50, q75 = np.quantile(p[name], [0.25, 0.5, 0.75], axis=0)
    frame = pd.DataFrame({"district": ags, "median": q50, "q25": q25, "q75": q75})
    if district_type is not None:
        types = dict(district_type) if not isinstance(district_type, (list, tuple)) else dict(zip(ags, district_type))
        frame["district_type"] = [types.get(a, "") for a in ags]
    across = {"parameter": label, "across_districts": _summary(q50)}
    across["across_districts"]["min"] = float(q50.min())
    across["across_districts"]["max"] = float(q50.max())
    if "district_type" in frame:
        across["by_district_type"] = {t: _summary(g["median"]) for t, g in frame.groupby("district_type", sort=True)}
    return frame, across


def local_weight_summary(draws: PosteriorDraws, district_type=None) -> tuple[pd.DataFrame, dict]:
    """Per-district posterior median of the local-incidence weight omega and its spread over districts.

    ``district_type`` optionally maps district keys to types (a dict, or a
    sequence aligned with the districts) for grouped summaries.
    """
    return _per_district(draws, "omega_C", "omega", district_type)


def fatigue_summary(draws: PosteriorDraws, district_type=None) -> tuple[pd.DataFrame, dict]:
    """Per-district posterior median of the fatigue time scale lambda (weeks)."""
    return _per_district(draws, "lambda_C", "lambda", district_type)


def write_summaries(out_dir: str | Path, draws: PosteriorDraws, panel: WeeklyPanel, district_type=None) -> dict:
    """Write ``trajectories.csv``, ``reaction_strength.csv``, ``omega.csv`` and ``lambda.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {n: out / f"{n}.csv" for n in ("trajectories", "reaction_strength", "omega", "lambda")}
    factor_trajectories(draws, panel).write(paths["trajectories"])
    reaction_strengths(draws).to_csv(paths["reaction_strength"], index=False)
    local_weight_summary(draws, district_type)[0].to_csv(paths["omega"], index=False)
    fatigue_summary(draws, district_type)[0].to_csv(paths["lambda"], index=False)
    return paths
