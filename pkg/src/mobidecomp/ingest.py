"""Reading, validating and aligning the weekly district panel and covariates."""

from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import (
    DegenerateIncidenceError,
    DuplicateKeyError,
    IncompleteWeekError,
    InvalidPopulationError,
    ParseError,
    RangeError,
    UnresolvableGapError,
    ValidationError,
)

MAX_WEEKDAY_COUNT = 5

COVARIATES = (
    "population_density",
    "income",
    "average_age",
    "share_65plus",
    "childcare_under3",
    "unemployment_rate",
    "employment_rate",
    "service_sectors",
    "manufacturing_sector",
    "tthic_sectors",
    "finance_sector",
    "construction",
    "agriculture_forestry_fisheries",
    "voter_turnout",
    "cdu",
    "spd",
    "afd",
    "fdp",
    "green_party",
)

# columns expressed in percent; checked against [0, 100]
PERCENT_COVARIATES = tuple(
    c for c in COVARIATES if c not in ("population_density", "income", "average_age")
)

DISTRICT_TYPES = ("large_city", "small_city", "suburban", "medium_rural", "rural")

FILES = {
    "duration": "panel_duration.csv",
    "incidence_local": "incidence_local.csv",
    "incidence_national": "incidence_national.csv",
    "tmax": "tmax.csv",
    "calendar": "calendar.csv",
    "covariates": "covariates.csv",
    "adjacency": "adjacency.csv",
}


@dataclass(frozen=True)
class StudyCalendar:
    """Contiguous run of weeks, each labelled by its (Sunday) week-ending date."""

    first_week_ending: dt.date = dt.date(2020, 3, 8)
    n_weeks: int = 52

    def __post_init__(self):
        if self.first_week_ending.weekday() != 6:
            raise ValueError("week-ending dates must be Sundays")

    @property
    def week_endings(self) -> tuple[dt.date, ...]:
        return tuple(self.first_week_ending + dt.timedelta(weeks=k) for k in range(self.n_weeks))

    def week_index(self, week_ending: dt.date) -> int:
        """1-based week number of ``week_ending``."""
        days = (week_ending - self.first_week_ending).days
        if days % 7 != 0:
            raise RangeError(f"{week_ending} is not a week-ending date of the study window")
        k = days // 7 + 1
        if not 1 <= k <= self.n_weeks:
            raise RangeError(f"{week_ending} lies outside the study window")
        return k

    def week_ending(self, index: int) -> dt.date:
        if not 1 <= index <= self.n_weeks:
            raise RangeError(f"week {index} outside 1..{self.n_weeks}")
        return self.first_week_ending + dt.timedelta(weeks=index - 1)


@dataclass(frozen=True)
class District:
    ags: str
    name: str = ""

    def __post_init__(self):
        if len(self.ags) != 5 or not self.ags.isdigit():
            raise ValidationError(f"district key must be 5 digits, got {self.ags!r}")


@dataclass(frozen=True, eq=False)
class WeeklyPanel:
    """Per-district weekly series over the study window.

    Array shapes are ``(n_districts, n_weeks)`` except ``incidence_national``
    which is ``(n_weeks,)``. Districts are ordered by key.
    """

    districts: tuple[District, ...]
    duration: np.ndarray
    incidence_local: np.ndarray
    incidence_national: np.ndarray
    tmax: np.ndarray
    vacation_days: np.ndarray
    holiday_count: np.ndarray
    calendar: StudyCalendar = field(default_factory=StudyCalendar)

    def __post_init__(self):
        for name in ("duration", "incidence_local", "incidence_national", "tmax"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("vacation_days", "holiday_count"):
            arr = np.array(getattr(self, name), dtype=int)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "districts", tuple(self.districts))
        self.validate()

    @property
    def ags(self) -> tuple[str, ...]:
        return tuple(d.ags for d in self.districts)

    @property
    def n_districts(self) -> int:
        return len(self.districts)

    @property
    def n_weeks(self) -> int:
        return self.calendar.n_weeks

    def validate(self) -> None:
        D, T = self.n_districts, self.n_weeks
        if D == 0:
            raise ValidationError("panel has no districts")
        if D > 400:
            raise ValidationError(f"panel has {D} districts, at most 400 supported")
        if len(set(self.ags)) != D:
            raise DuplicateKeyError("duplicate district keys in panel")
        for name in ("duration", "incidence_local", "tmax", "vacation_days", "holiday_count"):
            if getattr(self, name).shape != (D, T):
                raise ValidationError(f"{name} has shape {getattr(self, name).shape}, expected {(D, T)}")
        if self.incidence_national.shape != (T,):
            raise ValidationError("incidence_national must have one value per week")
        for name in ("duration", "incidence_local", "incidence_national", "tmax"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValidationError(f"{name} has missing or non-finite cells")
        if (self.duration <= 0).any():
            raise ValidationError("out-of-home duration must be positive")
        if (self.incidence_local < 0).any() or (self.incidence_national < 0).any():
            raise ValidationError("incidence must be non-negative")
        for name in ("vacation_days", "holiday_count"):
            arr = getattr(self, name)
            if ((arr < 0) | (arr > MAX_WEEKDAY_COUNT)).any():
                raise ValidationError(f"{name} must lie in 0..{MAX_WEEKDAY_COUNT}")

    def take(self, order: Sequence[int]) -> "WeeklyPanel":
        """Panel restricted/reordered to the given district positions (no re-sorting)."""
        idx = np.asarray(order, dtype=int)
        return WeeklyPanel(
            districts=tuple(self.districts[i] for i in idx),
            duration=self.duration[idx],
            incidence_local=self.incidence_local[idx],
            incidence_national=self.incidence_national,
            tmax=self.tmax[idx],
            vacation_days=self.vacation_days[idx],
            holiday_count=self.holiday_count[idx],
            calendar=self.calendar,
        )

    def equals(self, other: "WeeklyPanel") -> bool:
        return (
            self.districts == other.districts
            and self.calendar == other.calendar
            and all(
                np.array_equal(getattr(self, n), getattr(other, n))
                for n in (
                    "duration",
                    "incidence_local",
                    "incidence_national",
                    "tmax",
                    "vacation_days",
                    "holiday_count",
                )
            )
        )


@dataclass(frozen=True, eq=False)
class CovariateTable:
    """District-level covariates (raw units) plus urban-rural type."""

    ags: tuple[str, ...]
    values: pd.DataFrame  # index = ags, columns = covariate names
    district_type: tuple[str, ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.values.isna().any().any():
            missing = self.values.columns[self.values.isna().any()].tolist()
            raise ValidationError(f"covariates have missing values in {missing}")
        for col in PERCENT_COVARIATES:
            if col in self.values and ((self.values[col] < 0) | (self.values[col] > 100)).any():
                raise ValidationError(f"covariate {col} must be a share within [0, 100]")
        bad = sorted(set(self.district_type) - set(DISTRICT_TYPES))
        if bad:
            raise ValidationError(f"unknown district_type values {bad}; expected {DISTRICT_TYPES}")

    def frame(self, columns: Sequence[str] | None = None) -> pd.DataFrame:
        return self.values if columns is None else self.values.loc[:, list(columns)]

    def align(self, ags: Sequence[str]) -> "CovariateTable":
        missing = sorted(set(ags) - set(self.ags))
        if missing:
            raise ValidationError(f"no covariates for districts {missing}")
        pos = [self.ags.index(a) for a in ags]
        return CovariateTable(
            ags=tuple(ags),
            values=self.values.loc[list(ags)],
            district_type=tuple(self.district_type[i] for i in pos),
            names=tuple(self.names[i] for i in pos) if self.names else (),
        )


# --- preparation rules -------------------------------------------------------


def aggregate_daily_duration(daily_seconds_sum, population) -> np.ndarray:
    """Weekly hours/day per person from daily out-of-home second sums.

    Each day is divided by the resident population and by 3600; the weekly
    value is the mean of its seven days. ``daily_seconds_sum`` may be 1-D
    (days) or 2-D (districts x days); the day count must be a multiple of 7.
    """
    daily = np.asarray(daily_seconds_sum, dtype=float)
    pop = np.asarray(population, dtype=float)
    if (pop <= 0).any():
        raise InvalidPopulationError("population must be positive")
    n_days = daily.shape[-1]
    if n_days < 7 or n_days % 7:
        raise IncompleteWeekError(f"{n_days} daily values do not form complete weeks")
    if daily.ndim == 2:
        pop = pop.reshape(-1, 1)
    hours = daily / pop / 3600.0
    return hours.reshape(*hours.shape[:-1], n_days // 7, 7).mean(axis=-1)


def fill_missing_temperature(
    tmax, ags: Sequence[str], adjacency: Mapping[str, set] | Sequence[tuple[str, str]]
) -> np.ndarray:
    """Fill NaN cells with the mean of the neighbouring districts' observed values.

    Only cells observed in the input count as neighbour evidence, so applying
    the function twice gives the same result as applying it once.
    """
    tmax = np.array(tmax, dtype=float)
    neighbors = adjacency_map(adjacency) if not isinstance(adjacency, Mapping) else adjacency
    pos = {a: i for i, a in enumerate(ags)}
    observed = ~np.isnan(tmax)
    out = tmax.copy()
    for i, a in enumerate(ags):
        gaps = np.flatnonzero(~observed[i])
        if gaps.size == 0:
            continue
        nbr = [pos[b] for b in sorted(neighbors.get(a, ())) if b in pos and b != a]
        for t in gaps:
            vals = [tmax[j, t] for j in nbr if observed[j, t]]
            if not vals:
                raise UnresolvableGapError(
                    f"district {a} week {t + 1}: temperature missing and no neighbour observed"
                )
            out[i, t] = float(np.mean(vals))
    return out


def adjacency_map(pairs: Sequence[tuple[str, str]]) -> dict[str, set]:
    nbr: dict[str, set] = {}
    for a, b in pairs:
        nbr.setdefault(a, set()).add(b)
        nbr.setdefault(b, set()).add(a)
    return nbr


def normalize_incidence(local, national) -> tuple[np.ndarray, np.ndarray]:
    """Scale local and national incidence by the national maximum over the window."""
    local = np.asarray(local, dtype=float)
    national = np.asarray(national, dtype=float)
    peak = float(np.max(national)) if national.size else 0.0
    if not peak > 0:
        raise DegenerateIncidenceError("national incidence has no positive value")
    return local / peak, national / peak


# --- file loading -----------------------------------------------------------


def _read_csv(path: Path, columns: Sequence[str], dtypes: Mapping[str, type]) -> pd.DataFrame:
    if not path.exists():
        raise ParseError("file not found", path=str(path))
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise ParseError("empty file (header row is mandatory)", path=str(path)) from None
    except (UnicodeDecodeError, pd.errors.ParserError) as exc:
        raise ParseError(str(exc), path=str(path)) from None
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise ParseError(f"missing columns {missing}", path=str(path), line=1)
    if df.empty:
        raise ParseError("no data rows", path=str(path), line=1)
    out = pd.DataFrame(index=df.index)
    for col in df.columns:
        kind = dtypes.get(col, str)
        if kind is str:
            out[col] = df[col].str.strip()
            continue
        try:
            if kind is dt.date:
                out[col] = [dt.date.fromisoformat(v.strip()) for v in df[col]]
            elif kind is int:
                out[col] = [int(v) for v in df[col]]
            else:
                out[col] = [float(v) for v in df[col]]
        except ValueError as exc:
            bad = next(i for i, v in enumerate(df[col]) if not _parses(v, kind))
            raise ParseError(
                f"column {col!r}: cannot parse {df[col].iloc[bad]!r} ({exc})",
                path=str(path),
                line=bad + 2,
            ) from None
    return out


def _parses(value: str, kind) -> bool:
    try:
        if kind is dt.date:
            dt.date.fromisoformat(value.strip())
        else:
            kind(value)
        return True
    except ValueError:
        return False


def _check_ags(df: pd.DataFrame, path: Path, col: str = "ags") -> None:
    for i, a in enumerate(df[col]):
        if len(a) != 5 or not a.isdigit():
            raise ParseError(f"invalid district key {a!r}", path=str(path), line=i + 2)


def _to_grid(
    df: pd.DataFrame,
    value_col: str,
    ags: Sequence[str],
    calendar: StudyCalendar,
    path: Path,
    allow_missing: bool = False,
) -> np.ndarray:
    pos = {a: i for i, a in enumerate(ags)}
    grid = np.full((len(ags), calendar.n_weeks), np.nan)
    seen = set()
    for row, (a, week, v) in enumerate(zip(df["ags"], df["week_ending"], df[value_col])):
        line = row + 2
        if a not in pos:
            raise ValidationError(f"{path}:{line}: district {a} not in the duration panel")
        try:
            k = calendar.week_index(week)
        except RangeError as exc:
            raise RangeError(f"{path}:{line}: {exc}") from None
        if (a, k) in seen:
            raise DuplicateKeyError(f"{path}:{line}: duplicate entry for district {a}, week ending {week}")
        seen.add((a, k))
        grid[pos[a], k - 1] = v
    if not allow_missing and np.isnan(grid).any():
        i, t = map(int, np.argwhere(np.isnan(grid))[0])
        raise ValidationError(f"{path}: missing value for district {ags[i]}, week {t + 1}")
    return grid


def resolve_paths(paths: str | Path | Mapping[str, str | Path]) -> dict[str, Path]:
    """Map logical input names to files; a directory implies the default file names."""
    if isinstance(paths, (str, Path)):
        root = Path(paths)
        return {k: root / v for k, v in FILES.items()}
    resolved = {k: Path(v) for k, v in paths.items() if v is not None}
    if "dir" in resolved:
        root = resolved.pop("dir")
        for k, v in FILES.items():
            resolved.setdefault(k, root / v)
    return resolved


def load_panel(
    paths: str | Path | Mapping[str, str | Path], calendar: StudyCalendar | None = None
) -> WeeklyPanel:
    """Load and validate the weekly panel from the CSV file set.

    ``paths`` is either a directory holding the standard file names or a
    mapping with keys ``duration``, ``incidence_local``, ``incidence_national``,
    ``tmax``, ``calendar`` and optionally ``adjacency`` / ``covariates`` (for
    district names).
    """
    calendar = calendar or StudyCalendar()
    p = resolve_paths(paths)
    for key in ("duration", "incidence_local", "incidence_national", "tmax", "calendar"):
        if key not in p:
            raise ParseError(f"no path given for {key}")

    dur = _read_csv(p["duration"], ["ags", "week_ending", "hours_per_day"],
                    {"week_ending": dt.date, "hours_per_day": float})
    _check_ags(dur, p["duration"])
    ags = tuple(sorted(set(dur["ags"])))
    duration = _to_grid(dur, "hours_per_day", ags, calendar, p["duration"])

    loc = _read_csv(p["incidence_local"], ["ags", "week_ending", "cases_per_100k"],
                    {"week_ending": dt.date, "cases_per_100k": float})
    _check_ags(loc, p["incidence_local"])
    incidence_local = _to_grid(loc, "cases_per_100k", ags, calendar, p["incidence_local"])

    nat = _read_csv(p["incidence_national"], ["week_ending", "cases_per_100k"],
                    {"week_ending": dt.date, "cases_per_100k": float})
    national = np.full(calendar.n_weeks, np.nan)
    for row, (week, v) in enumerate(zip(nat["week_ending"], nat["cases_per_100k"])):
        try:
            k = calendar.week_index(week)
        except RangeError as exc:
            raise RangeError(f"{p['incidence_national']}:{row + 2}: {exc}") from None
        if not np.isnan(national[k - 1]):
            raise DuplicateKeyError(f"{p['incidence_national']}:{row + 2}: duplicate week {week}")
        national[k - 1] = v
    if np.isnan(national).any():
        k = int(np.flatnonzero(np.isnan(national))[0]) + 1
        raise ValidationError(f"{p['incidence_national']}: missing national incidence for week {k}")

    tm = _read_csv(p["tmax"], ["ags", "week_ending", "deg_c"], {"week_ending": dt.date, "deg_c": float})
    _check_ags(tm, p["tmax"])
    tmax = _to_grid(tm, "deg_c", ags, calendar, p["tmax"], allow_missing=True)
    if np.isnan(tmax).any():
        if "adjacency" not in p or not p["adjacency"].exists():
            raise UnresolvableGapError(f"{p['tmax']}: temperature gaps present but no adjacency file")
        tmax = fill_missing_temperature(tmax, ags, load_adjacency(p["adjacency"]))

    cal = _read_csv(p["calendar"], ["ags", "week_ending", "vacation_days", "holiday_count"],
                    {"week_ending": dt.date, "vacation_days": int, "holiday_count": int})
    _check_ags(cal, p["calendar"])
    for col in ("vacation_days", "holiday_count"):
        bad = np.flatnonzero((cal[col] < 0) | (cal[col] > MAX_WEEKDAY_COUNT))
        if bad.size:
            raise ValidationError(
                f"{p['calendar']}:{bad[0] + 2}: {col}={cal[col].iloc[bad[0]]} outside 0..{MAX_WEEKDAY_COUNT}"
            )
    vacation = _to_grid(cal, "vacation_days", ags, calendar, p["calendar"])
    holidays = _to_grid(cal, "holiday_count", ags, calendar, p["calendar"])

    names = {a: "" for a in ags}
    if "covariates" in p and p["covariates"].exists():
        cov = pd.read_csv(p["covariates"], dtype=str, keep_default_na=False)
        if "name" in cov.columns:
            names.update({a: n for a, n in zip(cov["ags"].str.strip(), cov["name"]) if a in names})

    return WeeklyPanel(
        districts=tuple(District(a, names[a]) for a in ags),
        duration=duration,
        incidence_local=incidence_local,
        incidence_national=national,
        tmax=tmax,
        vacation_days=vacation.astype(int),
        holiday_count=holidays.astype(int),
        calendar=calendar,
    )


def load_adjacency(path: str | Path) -> list[tuple[str, str]]:
    path = Path(path)
    df = _read_csv(path, ["ags_a", "ags_b"], {})
    _check_ags(df, path, "ags_a")
    _check_ags(df, path, "ags_b")
    return list(zip(df["ags_a"], df["ags_b"]))


def load_covariates(path: str | Path, columns: Sequence[str] = COVARIATES) -> CovariateTable:
    path = Path(path)
    df = _read_csv(path, ["ags", *columns, "district_type"], {c: float for c in columns})
    _check_ags(df, path)
    if df["ags"].duplicated().any():
        dup = int(np.flatnonzero(df["ags"].duplicated())[0])
        raise DuplicateKeyError(f"{path}:{dup + 2}: duplicate district {df['ags'].iloc[dup]}")
    df = df.sort_values("ags", kind="stable").reset_index(drop=True)
    values = df.loc[:, list(columns)].astype(float)
    values.index = pd.Index(df["ags"], name="ags")
    return CovariateTable(
        ags=tuple(df["ags"]),
        values=values,
        district_type=tuple(df["district_type"]),
        names=tuple(df["name"]) if "name" in df.columns else (),
    )


# --- writing ------------------------------------------------------------------


def write_panel(panel: WeeklyPanel, directory: str | Path) -> dict[str, Path]:
    """Write the panel as the standard CSV file set (values at full precision)."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    weeks = [d.isoformat() for d in panel.calendar.week_endings]

    def long(values, col, fmt=repr):
        rows = [f"ags,week_ending,{col}"]
        for i, a in enumerate(panel.ags):
            rows.extend(f"{a},{w},{fmt(values[i, t])}" for t, w in enumerate(weeks))
        return "\n".join(rows) + "\n"

    f = lambda v: repr(float(v))  # noqa: E731
    out = {k: root / FILES[k] for k in ("duration", "incidence_local", "incidence_national", "tmax", "calendar")}
    out["duration"].write_text(long(panel.duration, "hours_per_day", f), encoding="utf-8")
    out["incidence_local"].write_text(long(panel.incidence_local, "cases_per_100k", f), encoding="utf-8")
    out["tmax"].write_text(long(panel.tmax, "deg_c", f), encoding="utf-8")
    nat = ["week_ending,cases_per_100k"] + [f"{w},{f(v)}" for w, v in zip(weeks, panel.incidence_national)]
    out["incidence_national"].write_text("\n".join(nat) + "\n", encoding="utf-8")
    rows = ["ags,week_ending,vacation_days,holiday_count"]
    for i, a in enumerate(panel.ags):
        rows.extend(
            f"{a},{w},{int(panel.vacation_days[i, t])},{int(panel.holiday_count[i, t])}"
            for t, w in enumerate(weeks)
        )
    out["calendar"].write_text("\n".join(rows) + "\n", encoding="utf-8")
    return out


def write_covariates(table: CovariateTable, path: str | Path) -> Path:
    path = Path(path)
    df = table.values.copy()
    df.insert(0, "ags", list(table.ags))
    if table.names:
        df.insert(1, "name", list(table.names))
    df["district_type"] = list(table.district_type)
    df.to_csv(path, index=False, float_format="%.17g")
    return path


def write_adjacency(pairs: Sequence[tuple[str, str]], path: str | Path) -> Path:
    path = Path(path)
    lines = ["ags_a,ags_b"] + [f"{a},{b}" for a, b in pairs]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
