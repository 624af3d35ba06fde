"""Posterior summaries: trajectories, reaction strength, local weights, cross-district impact."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from mobidecomp import model as M
from mobidecomp import posterior as P
from mobidecomp.errors import RangeError
from mobidecomp.ingest import District, StudyCalendar, WeeklyPanel
from mobidecomp.sampler import STAT_FIELDS, PosteriorDraws


def make_draws(space, X, n_chains=1):
    X = np.asarray(X, dtype=float).reshape(n_chains, -1, space.dim)
    stats = {k: np.zeros(X.shape[:2]) for k in STAT_FIELDS}
    return PosteriorDraws(X, space.names, stats, np.ones(n_chains), np.ones((n_chains, space.dim)))


def point(space, hypers=None, offsets=None):
    hypers = M.GlobalHypers.typical() if hypers is None else hypers
    offsets = np.zeros((space.n_districts, 10)) if offsets is None else offsets
    return space.to_unconstrained(hypers, offsets)


def flat_panel(n_weeks=8, vacation=0, incidence=0.0):
    shape = (2, n_weeks)
    return WeeklyPanel(
        districts=(District("09000"), District("09001")),
        duration=np.full(shape, 8.0),
        incidence_local=np.full(shape, incidence),
        incidence_national=np.full(n_weeks, incidence),
        tmax=np.full(shape, 15.0),
        vacation_days=np.full(shape, vacation),
        holiday_count=np.zeros(shape, dtype=int),
        calendar=StudyCalendar(n_weeks=n_weeks),
    )


# --- reaction strength -------------------------------------------------------------------------


def test_reaction_integral_examples():
    assert P.reaction_integral(0.0, 30.0, 0.0, 13.0) == 0.0
    assert P.reaction_integral(1.5, math.inf, 0.0, 13.0) == 19.5
    assert P.reaction_integral(1.5, 30.0, 0.0, 13.0) == pytest.approx(45 * (1 - math.exp(-13 / 30)), rel=1e-14)
    assert P.reaction_integral(1.5, 30.0, 0.0, 13.0) == pytest.approx(15.824, abs=1e-3)


def test_reaction_integral_matches_quadrature_on_random_parameters():
    rng = np.random.default_rng(7)
    kappa = rng.uniform(0.01, 5.0, 1000)
    lam = np.exp(rng.uniform(np.log(0.5), np.log(500.0), 1000))
    for w in (P.FIRST_WAVE, P.SECOND_WAVE):
        closed = P.reaction_integral(kappa, lam, w.t0, w.t1)
        for k, l_, c in zip(kappa, lam, closed):
            quad, _ = integrate.quad(lambda t: k * math.exp(-t / l_), w.t0, w.t1, epsabs=0, epsrel=1e-13)
            assert c == pytest.approx(quad, rel=1e-8)


def test_flat_decay_limit_is_exact_for_huge_lambda():
    assert P.reaction_integral(1.5, 1e300, 0.0, 13.0) == pytest.approx(19.5, rel=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.0, 10.0), st.floats(0.1, 1e4))
def test_window_integrals_bounded_by_total(kappa, lam):
    parts = (
        P.reaction_integral(kappa, lam, 0.0, 13.0)
        + P.reaction_integral(kappa, lam, 13.0, 26.0)
        + P.reaction_integral(kappa, lam, 26.0, 52.0)
    )
    assert parts <= kappa * lam * (1 + 1e-12) + 1e-300


def test_reaction_strength_is_summarized_per_draw():
    space = M.ParameterSpace(["09000", "09001"])
    rng = np.random.default_rng(0)
    X = np.tile(point(space), (101, 1))
    X[:, space.index["z_C_kappa[09001]"]] = rng.standard_normal(101)
    draws = make_draws(space, X)
    p = P.district_draws(draws)
    per_draw = P.reaction_integral(p["kappa_C"][:, 1], p["lambda_C"][:, 1], 0.0, 13.0)
    out = P.reaction_strength(draws, "09001", "first")
    assert out["median"] == pytest.approx(np.median(per_draw), rel=1e-14)
    assert out["q25"] <= out["median"] <= out["q75"]
    table = P.reaction_strengths(draws)
    assert list(table.columns) == ["district", "wave", "median", "q25", "q75"]
    assert len(table) == 4
    row = table[(table.district == "09001") & (table.wave == "first")].iloc[0]
    assert row["median"] == pytest.approx(out["median"], rel=1e-14)


def test_wave_windows():
    assert P.FIRST_WAVE.weeks.tolist() == list(range(1, 14))
    assert len(P.SECOND_WAVE.weeks) == 26 and P.SECOND_WAVE.weeks[-1] == 52
    assert P.SECOND_WAVE.t1 - P.SECOND_WAVE.t0 == 26
    with pytest.raises(RangeError):
        P.wave("third")


# --- local weight ----------------------------------------------------------------------------------


def test_omega_at_zero_location_and_offsets_is_half():
    space = M.ParameterSpace(["09000", "09001"])
    x = point(space)
    assert x[space.index["mu_C_omega"]] == 0.0
    frame, across = P.local_weight_summary(make_draws(space, x[None, :]))
    np.testing.assert_allclose(frame["median"], 0.5, rtol=1e-15)
    assert across["across_districts"]["median"] == pytest.approx(0.5)


def test_omega_of_log_three_offset_is_three_quarters():
    space = M.ParameterSpace(["09000", "09001"])
    x = point(space)
    x[space.index["z_C_omega[09000]"]] = math.log(3.0)
    frame, _ = P.local_weight_summary(make_draws(space, x[None, :]))
    assert frame["median"].iloc[0] == pytest.approx(0.75, rel=1e-14)


def test_symmetric_offset_draws_give_median_near_half():
    space = M.ParameterSpace(["09000", "09001"])
    rng = np.random.default_rng(1)
    X = np.tile(point(space), (4000, 1))
    z = rng.standard_normal(2000)
    for a in space.ags:
        X[:, space.index[f"z_C_omega[{a}]"]] = np.concatenate([z, -z])
    frame, across = P.local_weight_summary(make_draws(space, X), {"09000": "urban", "09001": "rural"})
    np.testing.assert_allclose(frame["median"], 0.5, atol=1e-12)
    assert ((frame[["q25", "q75"]] > 0) & (frame[["q25", "q75"]] < 1)).all().all()
    assert set(across["by_district_type"]) == {"rural", "urban"}


def test_fatigue_summary_is_lambda():
    space = M.ParameterSpace(["09000", "09001"])
    x = point(space)
    frame, _ = P.fatigue_summary(make_draws(space, x[None, :]))
    assert frame["median"].iloc[0] == pytest.approx(math.log1p(math.exp(30.0)), rel=1e-14)


# --- trajectories --------------------------------------------------------------------------------------


def test_zero_incidence_disease_factor_is_one():
    panel = flat_panel()
    space = M.ParameterSpace(panel.ags)
    rng = np.random.default_rng(2)
    X = point(space) + 0.3 * rng.standard_normal((50, space.dim))
    traj = P.factor_trajectories(make_draws(space, X), panel)
    np.testing.assert_array_equal(traj.get("C"), 1.0)


def test_single_draw_quantiles_coincide(panel2):
    space = M.ParameterSpace(panel2.ags)
    traj = P.factor_trajectories(make_draws(space, point(space)[None, :]), panel2)
    np.testing.assert_allclose(traj.values[..., 0], traj.values[..., 1], rtol=1e-14)
    np.testing.assert_allclose(traj.values[..., 2], traj.values[..., 1], rtol=1e-14)


def test_vacation_week_matches_direct_re_evaluation():
    panel = flat_panel(vacation=5)
    space = M.ParameterSpace(panel.ags)
    rng = np.random.default_rng(3)
    X = point(space) + 0.2 * rng.standard_normal((400, space.dim))
    draws = make_draws(space, X)
    traj = P.factor_trajectories(draws, panel)
    theta = P.district_draws(draws)["theta_V"]
    expected = M.vacation_factor(5, np.median(theta, axis=0))
    # the factor is increasing in theta, so medians commute with it
    np.testing.assert_allclose(traj.get("V")[:, 3, 1], expected, rtol=1e-12)
    assert (traj.get("V")[..., 1] < 1).all()


def test_quantiles_monotone_and_write(panel2, tmp_path):
    space = M.ParameterSpace(panel2.ags)
    rng = np.random.default_rng(4)
    draws = make_draws(space, point(space) + 0.2 * rng.standard_normal((60, space.dim)), n_chains=2)
    traj = P.factor_trajectories(draws, panel2, max_cells=1000)  # forces district blocks
    assert (np.diff(traj.values, axis=-1) >= 0).all()
    whole = P.factor_trajectories(draws, panel2)
    np.testing.assert_array_equal(traj.values, whole.values)
    paths = P.write_summaries(tmp_path, draws, panel2)
    frame = traj.frame()
    assert list(frame.columns) == ["district", "week", "factor", "q025", "q50", "q975"]
    assert len(frame) == 4 * 2 * 52
    assert all(p.exists() for p in paths.values())


# --- cross-district impact ------------------------------------------------------------------------------


def trajectory_with_medians(medians, n_weeks=4):
    D = len(medians)
    values = np.ones((4, D, n_weeks, 3))
    values[0, :, :, 1] = np.asarray(medians)[:, None]
    return P.FactorTrajectory(tuple(f"{9000 + i:05d}" for i in range(D)), P.FACTORS, values,
                              StudyCalendar(n_weeks=n_weeks))  # fmt: skip


def test_cross_district_order_statistics():
    out = P.cross_district_impact(trajectory_with_medians([0.9, 0.7, 0.8]), 2)
    assert out["median"] == pytest.approx(0.8)
    same = P.cross_district_impact(trajectory_with_medians([0.77] * 5), 1)
    assert same["q75"] - same["q25"] == 0.0


def test_cross_district_week_by_date_and_range_errors():
    traj = trajectory_with_medians([0.9, 0.7, 0.8])
    assert P.cross_district_impact(traj, "2020-03-15")["week"] == 2
    with pytest.raises(RangeError):
        P.cross_district_impact(traj, 5)
    with pytest.raises(RangeError):
        P.cross_district_impact(traj, 0)
