from __future__ import annotations

import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mobidecomp import ingest
from mobidecomp.errors import (
    DegenerateIncidenceError,
    DuplicateKeyError,
    IncompleteWeekError,
    InvalidPopulationError,
    ParseError,
    RangeError,
    UnresolvableGapError,
    ValidationError,
)
from mobidecomp.synth import synthetic_covariates


# --- calendar -----------------------------------------------------------------------


def test_calendar_endpoints():
    cal = ingest.StudyCalendar()
    assert cal.week_index(dt.date(2020, 3, 8)) == 1
    assert cal.week_index(dt.date(2021, 2, 28)) == 52
    assert cal.week_ending(7) == dt.date(2020, 4, 19)


def test_calendar_is_bijective():
    cal = ingest.StudyCalendar()
    assert [cal.week_index(d) for d in cal.week_endings] == list(range(1, 53))


@pytest.mark.parametrize("date", [dt.date(2020, 3, 1), dt.date(2021, 3, 7), dt.date(2020, 3, 9)])
def test_calendar_rejects_dates_outside_window(date):
    with pytest.raises(RangeError):
        ingest.StudyCalendar().week_index(date)


# --- aggregation ------------------------------------------------------------------------


def test_aggregate_unit_identity():
    out = ingest.aggregate_daily_duration(np.full(7, 3.6e6), 1000)
    assert out == pytest.approx([1.0], abs=1e-15)


def test_aggregate_hand_mean():
    hours = np.array([7, 7, 7, 7, 7, 9, 9], dtype=float)
    pop = 250.0
    out = ingest.aggregate_daily_duration(hours * 3600 * pop, pop)
    assert out[0] == pytest.approx(53 / 7, abs=1e-12)
    assert round(float(out[0]), 4) == 7.5714


def test_aggregate_rejects_zero_population():
    with pytest.raises(InvalidPopulationError):
        ingest.aggregate_daily_duration(np.ones(7), 0)


def test_aggregate_rejects_incomplete_week():
    with pytest.raises(IncompleteWeekError):
        ingest.aggregate_daily_duration(np.ones(6), 10)


def test_aggregate_two_dimensional():
    daily = np.vstack([np.full(14, 3600.0 * 10), np.full(14, 3600.0 * 40)])
    out = ingest.aggregate_daily_duration(daily, [10, 20])
    np.testing.assert_allclose(out, [[1.0, 1.0], [2.0, 2.0]])


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(0, 1e7), min_size=7, max_size=7),
    st.lists(st.floats(0, 1e7), min_size=7, max_size=7),
    st.floats(0.1, 1e6),
    st.floats(0.1, 10),
)
def test_aggregate_linear_and_inverse_in_population(a, b, pop, k):
    f = ingest.aggregate_daily_duration
    lhs = f(np.add(a, b), pop)
    assert lhs == pytest.approx(f(a, pop) + f(b, pop), rel=1e-9, abs=1e-12)
    assert f(a, pop * k) == pytest.approx(f(a, pop) / k, rel=1e-9, abs=1e-12)


# --- temperature fill -------------------------------------------------------------------------


def test_fill_identity_without_gaps():
    t = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(ingest.fill_missing_temperature(t, ["01001", "01002"], []), t)


def test_fill_two_point_mean():
    t = np.array([[np.nan, 5.0], [10.0, 6.0], [14.0, 7.0]])
    pairs = [("01001", "01002"), ("01001", "01003")]
    out = ingest.fill_missing_temperature(t, ["01001", "01002", "01003"], pairs)
    assert out[0, 0] == 12.0
    np.testing.assert_array_equal(out[1:], t[1:])
    assert out[0, 1] == 5.0


def test_fill_isolated_gap_fails():
    t = np.array([[np.nan, 5.0], [10.0, 6.0]])
    with pytest.raises(UnresolvableGapError):
        ingest.fill_missing_temperature(t, ["01001", "01002"], [])


def test_fill_neighbours_missing_same_week_fails():
    t = np.array([[np.nan, 5.0], [np.nan, 6.0]])
    with pytest.raises(UnresolvableGapError):
        ingest.fill_missing_temperature(t, ["01001", "01002"], [("01001", "01002")])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_fill_idempotent(seed):
    rng = np.random.default_rng(seed)
    t = rng.normal(15, 5, size=(4, 6))
    t[rng.random(t.shape) < 0.2] = np.nan
    t[0] = rng.normal(15, 5, size=6)  # a complete hub
    ags = ["01001", "01002", "01003", "01004"]
    pairs = [("01001", a) for a in ags[1:]]
    once = ingest.fill_missing_temperature(t, ags, pairs)
    np.testing.assert_array_equal(ingest.fill_missing_temperature(once, ags, pairs), once)


# --- incidence normalisation ---------------------------------------------------------------


def test_normalize_peak_and_ratio():
    local, nat = ingest.normalize_incidence([[125.0, 0.0]], [250.0, 100.0])
    assert nat.max() == 1.0
    assert local[0, 0] == 0.5
    assert local[0, 1] == 0.0


def test_normalize_rejects_all_zero_national():
    with pytest.raises(DegenerateIncidenceError):
        ingest.normalize_incidence([[1.0]], [0.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 1e4), min_size=3, max_size=10))
def test_normalize_preserves_ratios(values):
    v = np.array(values)
    local, nat = ingest.normalize_incidence(v[None, :], v)
    assert nat[0] / nat[1] == pytest.approx(v[0] / v[1], rel=1e-12)
    assert local[0, 2] / local[0, 0] == pytest.approx(v[2] / v[0], rel=1e-12)


# --- file loading -----------------------------------------------------------------------------


def test_round_trip_is_bit_exact(panel2, tmp_path):
    ingest.write_panel(panel2, tmp_path)
    again = ingest.load_panel(tmp_path, panel2.calendar)
    assert again.ags == panel2.ags
    for name in ("duration", "incidence_local", "incidence_national", "tmax", "vacation_days", "holiday_count"):
        np.testing.assert_array_equal(getattr(again, name), getattr(panel2, name))
    assert again.duration.shape == (2, 52)


def _write_set(tmp_path, panel2):
    ingest.write_panel(panel2, tmp_path)
    return tmp_path


def test_header_only_file_is_parse_error(panel2, tmp_path):
    d = _write_set(tmp_path, panel2)
    (d / "tmax.csv").write_text("ags,week_ending,deg_c\n", encoding="utf-8")
    with pytest.raises(ParseError, match="no data rows"):
        ingest.load_panel(d)


def test_missing_file_names_path(panel2, tmp_path):
    d = _write_set(tmp_path, panel2)
    (d / "tmax.csv").unlink()
    with pytest.raises(ParseError, match="tmax.csv"):
        ingest.load_panel(d)


def test_vacation_days_above_five_rejected(panel2, tmp_path):
    d = _write_set(tmp_path, panel2)
    path = d / "calendar.csv"
    lines = path.read_text().splitlines()
    a, w, _, h = lines[3].split(",")
    lines[3] = f"{a},{w},6,{h}"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValidationError, match="calendar.csv:4"):
        ingest.load_panel(d)


def test_week_outside_window_is_range_error(panel2, tmp_path):
    d = _write_set(tmp_path, panel2)
    path = d / "panel_duration.csv"
    lines = path.read_text().splitlines()
    a, _, v = lines[1].split(",")
    lines[1] = f"{a},2021-03-07,{v}"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(RangeError):
        ingest.load_panel(d)


def test_duplicate_district_week(panel2, tmp_path):
    d = _write_set(tmp_path, panel2)
    path = d / "incidence_local.csv"
    lines = path.read_text().splitlines()
    lines.append(lines[1])
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DuplicateKeyError):
        ingest.load_panel(d)


def test_unparsable_value_reports_line(panel2, tmp_path):
    d = _write_set(tmp_path, panel2)
    path = d / "panel_duration.csv"
    lines = path.read_text().splitlines()
    a, w, _ = lines[5].split(",")
    lines[5] = f"{a},{w},abc"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError, match="panel_duration.csv:6"):
        ingest.load_panel(d)


def test_temperature_gap_filled_from_adjacency(panel2, tmp_path):
    d = _write_set(tmp_path, panel2)
    path = d / "tmax.csv"
    lines = path.read_text().splitlines()
    del lines[1]  # first district, week 1
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(UnresolvableGapError):
        ingest.load_panel(d)
    ingest.write_adjacency([panel2.ags], d / "adjacency.csv")
    filled = ingest.load_panel(d)
    assert filled.tmax[0, 0] == panel2.tmax[1, 0]


def test_districts_sorted_by_key(panel2, tmp_path):
    d = _write_set(tmp_path, panel2)
    path = d / "panel_duration.csv"
    lines = path.read_text().splitlines()
    path.write_text("\n".join([lines[0]] + lines[:0:-1]) + "\n")
    assert ingest.load_panel(d).ags == tuple(sorted(panel2.ags))


def test_panel_rejects_bad_values(panel2):
    with pytest.raises(ValidationError):
        ingest.WeeklyPanel(
            districts=panel2.districts, duration=-panel2.duration, incidence_local=panel2.incidence_local,
            incidence_national=panel2.incidence_national, tmax=panel2.tmax,
            vacation_days=panel2.vacation_days, holiday_count=panel2.holiday_count,
        )  # fmt: skip


def test_covariates_round_trip(tmp_path):
    table = synthetic_covariates(12, seed=1)
    ingest.write_covariates(table, tmp_path / "covariates.csv")
    again = ingest.load_covariates(tmp_path / "covariates.csv")
    assert again.ags == table.ags
    assert again.district_type == table.district_type
    np.testing.assert_array_equal(again.values.to_numpy(), table.values.to_numpy())


def test_covariate_share_out_of_range(tmp_path):
    table = synthetic_covariates(5, seed=1)
    vals = table.values.copy()
    vals.iloc[0, vals.columns.get_loc("cdu")] = 120.0
    with pytest.raises(ValidationError, match="cdu"):
        ingest.CovariateTable(table.ags, vals, table.district_type)


def test_covariate_duplicate_district(tmp_path):
    table = synthetic_covariates(5, seed=1)
    path = ingest.write_covariates(table, tmp_path / "c.csv")
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines + [lines[1]]) + "\n")
    with pytest.raises(DuplicateKeyError):
        ingest.load_covariates(path)
