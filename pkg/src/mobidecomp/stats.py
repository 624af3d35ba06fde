"""Frequentist analysis of district-level posterior summaries.

Standardization, ordinary least squares with the usual inference, model
selection criteria, exhaustive best-subset search, Welch's t-test, peak
incidence, and a two-stage mediation model with bootstrap intervals.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import linalg, stats

from .errors import (
    ConfigurationError,
    DegenerateColumnError,
    DegenerateFitError,
    InsufficientDataError,
    PressUndefinedError,
    RangeError,
    SingularDesignError,
)

RANK_TOL = 1e-10
HAT_TOL = 1e-10
SSE_FLOOR = 1e-12  # relative to the total sum of squares
COLLINEARITY_TOL = 1e-12


def standardize(table) -> pd.DataFrame:
    """Z-score every column with the sample standard deviation (n - 1 denominator).

    Raises
    ------
    DegenerateColumnError
        If a column is constant (the message names it).
    """
    frame = pd.DataFrame(table).astype(float)
    sd = frame.std(axis=0, ddof=1)
    for name, s in sd.items():
        if not s > 0:
            raise DegenerateColumnError(f"column {name!r} is constant and cannot be standardized")
    return (frame - frame.mean(axis=0)) / sd


def add_intercept(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return np.column_stack([np.ones(X.shape[0]), X])


# --- ordinary least squares --------------------------------------------------------------


@dataclass
class RegressionFit:
    """Least-squares fit with coefficient inference and fit statistics.

    ``p`` counts all parameters including the intercept. ``hat`` holds the
    leverage of each row; ``press`` is ``None`` when some leverage is 1.
    """

    names: tuple
    coef: np.ndarray
    se: np.ndarray
    t: np.ndarray
    p_values: np.ndarray
    r2: float
    adj_r2: float
    sse: float
    sst: float
    n: int
    p: int
    sigma2: float
    residuals: np.ndarray = field(repr=False)
    hat: np.ndarray = field(repr=False)
    press: float | None = None

    @property
    def pred_r2(self) -> float | None:
        return None if self.press is None else 1.0 - self.press / self.sst

    def coefficient_table(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"variable": self.names, "coefficient": self.coef, "std_error": self.se, "t": self.t,
             "p_value": self.p_values}
        )  # fmt: skip


def _dependent_columns(X: np.ndarray) -> list[int]:
    """Columns that are (numerically) linear combinations of earlier ones."""
    _, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > RANK_TOL * max(d[0], 1.0))) if d.size else 0
    return sorted(int(c) for c in piv[rank:])


def ols(X, y, names: Sequence[str] | None = None) -> RegressionFit:
    """Ordinary least squares of ``y`` on the design ``X`` (include the intercept column yourself).

    Standard errors use sigma^2 (X'X)^-1 with sigma^2 = SSE / (n - p); p-values
    are two-sided from the t distribution with n - p degrees of freedom.

    Raises
    ------
    InsufficientDataError
        If there are not more rows than columns.
    SingularDesignError
        If ``X`` does not have full column rank; ``columns`` lists the
        offending columns.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("X must be 2-D with one row per observation")
    n, p = X.shape
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(p))
    if n <= p:
        raise InsufficientDataError(f"need more observations than parameters (n={n}, p={p})")
    Q, R = np.linalg.qr(X)
    if np.min(np.abs(np.diag(R))) <= RANK_TOL * max(np.max(np.abs(np.diag(R))), 1.0):
        bad = _dependent_columns(X)
        raise SingularDesignError(
            f"design is rank deficient; dependent columns {[names[j] for j in bad]}", [names[j] for j in bad]
        )
    coef = linalg.solve_triangular(R, Q.T @ y)
    fitted = X @ coef
    resid = y - fitted
    sse = float(resid @ resid)
    ybar = y.mean()
    sst = float(np.sum((y - ybar) ** 2))
    df = n - p
    sigma2 = sse / df
    Rinv = linalg.solve_triangular(R, np.eye(p))
    se = np.sqrt(sigma2 * np.sum(Rinv**2, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, coef / se, np.where(coef == 0, 0.0, np.sign(coef) * np.inf))
    p_values = np.clip(2.0 * stats.t.sf(np.abs(t), df), 0.0, 1.0)
    r2 = 1.0 - sse / sst if sst > 0 else float("nan")
    adj_r2 = 1.0 - (1.0 - r2) * (n - 1) / df if sst > 0 else float("nan")
    hat = np.sum(Q**2, axis=1)
    press = None
    if np.all(hat < 1.0 - HAT_TOL):
        press = float(np.sum((resid / (1.0 - hat)) ** 2))
    return RegressionFit(names, coef, se, t, p_values, r2, adj_r2, sse, sst, n, p, sigma2, resid, hat, press)


def selection_criteria(fit: RegressionFit, full_model_sigma2: float | None = None) -> dict:
    """Adjusted and predicted R^2, Mallows' Cp, AIC and BIC of one fit.

    AIC = n ln(SSE/n) + 2p and BIC = n ln(SSE/n) + p ln(n). Cp needs the
    error variance of the full model fitted to the same rows; it is ``None``
    when that is not given.

    Raises
    ------
    PressUndefinedError
        If some row has leverage 1, so its leave-one-out residual is undefined.
    DegenerateFitError
        If the fit is exact (SSE at or below a floor of 1e-12 * SST), where the
        information criteria diverge.
    """
    if fit.press is None:
        raise PressUndefinedError("a row has leverage 1; leave-one-out residuals are undefined")
    if fit.sse <= SSE_FLOOR * max(fit.sst, np.finfo(float).tiny):
        raise DegenerateFitError(f"exact fit (SSE={fit.sse:.3g}); AIC and BIC are unbounded")
    n, p = fit.n, fit.p
    base = n * math.log(fit.sse / n)
    cp = None if full_model_sigma2 is None else fit.sse / full_model_sigma2 - n + 2 * p
    return {
        "r2": fit.r2,
        "adj_r2": fit.adj_r2,
        "pred_r2": fit.pred_r2,
        "cp": cp,
        "aic": base + 2 * p,
        "bic": base + p * math.log(n),
        "p": p,
    }


def loo_press(X, y) -> float:
    """PRESS by explicit leave-one-out refits (slow; a reference for the leverage identity)."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    total = 0.0
    for i in range(y.size):
        keep = np.arange(y.size) != i
        beta, *_ = np.linalg.lstsq(X[keep], y[keep], rcond=None)
        total += float((y[i] - X[i] @ beta) ** 2)
    return total


# --- exhaustive best-subset search -----------------------------------------------------------


@dataclass
class SubsetSearch:
    """Best subset per size from an exhaustive search.

    ``best[s]`` holds the column indices (ascending) of the size-``s`` subset
    with the largest adjusted R^2, which for a fixed size is the smallest SSE.
    """

    names: tuple
    n: int
    best: dict
    sse: dict
    r2: dict
    adj_r2: dict
    n_subsets: int
    n_singular: int

    def best_names(self, size: int) -> tuple:
        return tuple(self.names[j] for j in self.best[size])

    @property
    def overall_best(self) -> int:
        """Size whose best subset has the highest adjusted R^2 (smallest size on ties)."""
        return max(sorted(self.best), key=lambda s: (self.adj_r2[s], -s))


def exhaustive_search(X, y, names: Sequence[str] | None = None, max_size: int | None = None,
                      chunk: int = 50_000) -> SubsetSearch:  # fmt: skip
    """Fit every non-empty subset of the ``k <= 20`` columns of ``X`` (an intercept is always included).

    Subsets of one size are solved together through the centred Gram matrix.
    Ties in SSE go to the subset that comes first in lexicographic order of
    column indices. Subsets whose columns are numerically collinear
    (correlation-matrix determinant at most 1e-12) are skipped and counted.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n, k = X.shape
    if k > 20:
        raise ConfigurationError(f"exhaustive search supports at most 20 columns, got {k}")
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(k))
    max_size = k if max_size is None else min(max_size, k, n - 2)
    Xc = X - X.mean(axis=0)
    yc = y - y.mean()
    G = Xc.T @ Xc
    b = Xc.T @ yc
    sst = float(yc @ yc)
    best, sse_best, r2, adj = {}, {}, {}, {}
    n_subsets = n_singular = 0
    for s in range(1, max_size + 1):
        combos = np.array(list(itertools.combinations(range(k), s)), dtype=np.intp)
        n_subsets += len(combos)
        top_sse, top_idx = math.inf, None
        for start in range(0, len(combos), chunk):
            c = combos[start : start + chunk]
            Gs = G[c[:, :, None], c[:, None, :]]
            bs = b[c]
            diag = np.einsum("mii->mi", Gs)
            # det(G_S) / prod(diag) is the determinant of the subset's correlation
            # matrix: 1 for orthogonal columns, 0 for collinear ones
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.linalg.det(Gs) / np.prod(diag, axis=1)
            ok = np.all(diag > 0, axis=1) & (ratio > COLLINEARITY_TOL)
            n_singular += int((~ok).sum())
            if not ok.any():
                continue
            coef = np.linalg.solve(Gs[ok], bs[ok][..., None])[..., 0]
            sse = sst - np.sum(bs[ok] * coef, axis=1)
            j = int(np.argmin(sse))  # first minimum: lexicographic tie-break
            if sse[j] < top_sse:
                top_sse, top_idx = float(sse[j]), tuple(int(v) for v in c[ok][j])
        if top_idx is None:
            continue
        top_sse = max(top_sse, 0.0)
        best[s] = top_idx
        sse_best[s] = top_sse
        r2[s] = 1.0 - top_sse / sst
        adj[s] = 1.0 - (1.0 - r2[s]) * (n - 1) / (n - s - 1)
    return SubsetSearch(names, n, best, sse_best, r2, adj, n_subsets, n_singular)


def criteria_table(search: SubsetSearch, X, y) -> pd.DataFrame:
    """Refit each size's best subset and tabulate R^2, adjusted/predicted R^2, Cp, AIC, BIC."""
    X = np.asarray(X, dtype=float)
    full = ols(add_intercept(X), y)
    rows = []
    for s in sorted(search.best):
        cols = list(search.best[s])
        fit = ols(add_intercept(X[:, cols]), y)
        c = selection_criteria(fit, full.sigma2)
        rows.append({"size": s, "variables": ";".join(search.best_names(s)), **c})
    return pd.DataFrame(rows)


def select_size(table: pd.DataFrame) -> tuple[int, dict]:
    """Size preferred by most criteria: max adjusted and predicted R^2, min Cp, AIC and BIC.

    Ties between sizes with equal votes go to the smaller size.
    """
    votes = {
        "adj_r2": int(table.loc[table["adj_r2"].idxmax(), "size"]),
        "pred_r2": int(table.loc[table["pred_r2"].idxmax(), "size"]),
        "cp": int(table.loc[table["cp"].idxmin(), "size"]),
        "aic": int(table.loc[table["aic"].idxmin(), "size"]),
        "bic": int(table.loc[table["bic"].idxmin(), "size"]),
    }
    counts = Counter(votes.values())
    size = min(counts, key=lambda s: (-counts[s], s))
    return size, votes


# --- group comparison and peaks --------------------------------------------------------------


def welch_t_test(a, b) -> dict:
    """Two-sided Welch t-test for a difference in means, with Satterthwaite degrees of freedom.

    Raises
    ------
    InsufficientDataError
        If a group has fewer than two values or neither group varies.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size < 2 or b.size < 2:
        raise InsufficientDataError("each group needs at least two values")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    if not va + vb > 0:
        raise InsufficientDataError("both groups have zero variance")
    diff = a.mean() - b.mean()
    t = diff / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))
    return {"t": float(t), "df": float(df), "p": p, "mean_a": float(a.mean()), "mean_b": float(b.mean()),
            "n_a": int(a.size), "n_b": int(b.size)}  # fmt: skip


def group_t_tests(values, groups, order: Sequence[str]) -> list[dict]:
    """Welch tests between neighbouring groups in ``order`` (e.g. along the urban-rural gradient)."""
    values = np.asarray(values, dtype=float)
    groups = np.asarray(groups)
    out = []
    for g1, g2 in zip(order[:-1], order[1:]):
        try:
            res = welch_t_test(values[groups == g1], values[groups == g2])
        except InsufficientDataError as exc:
            res = {"error": str(exc)}
        out.append({"group_a": g1, "group_b": g2, **res})
    return out


def peak_incidence(series, window=None) -> float | np.ndarray:
    """90th percentile of weekly incidence within a window, linear interpolation between order statistics.

    Parameters
    ----------
    series : array_like
        Weekly values; a 2-D array is treated as one row per district.
    window : WaveWindow or (first_week, last_week), optional
        1-based inclusive week range; the whole series when omitted.

    Raises
    ------
    RangeError
        If the window selects no weeks.
    """
    x = np.asarray(series, dtype=float)
    T = x.shape[-1]
    if window is None:
        lo, hi = 1, T
    elif hasattr(window, "first_week"):
        lo, hi = window.first_week, window.last_week
    else:
        lo, hi = window
    lo, hi = max(int(lo), 1), min(int(hi), T)
    if hi < lo:
        raise RangeError(f"window {window} selects no weeks of a {T}-week series")
    q = np.quantile(x[..., lo - 1 : hi], 0.9, axis=-1, method="linear")
    return float(q) if np.ndim(q) == 0 else q


# --- mediation ---------------------------------------------------------------------------


@dataclass
class MediationFit:
    """Per-covariate path estimates of a single-mediator model with bootstrap percentile intervals.

    ``paths`` has one row per covariate and columns ``a`` (covariate to
    mediator), ``b`` (mediator to outcome, shared), ``direct``, ``indirect``
    (a * b) and ``total`` (direct + indirect). ``ci`` maps each of those
    columns to ``(lower, upper)`` arrays.
    """

    names: tuple
    paths: pd.DataFrame
    ci: dict
    n_boot: int
    n_failed: int
    level: float
    seed: int

    def report(self) -> dict:
        rows = []
        for i, name in enumerate(self.names):
            row = {"variable": name}
            for col in ("a", "b", "direct", "indirect", "total"):
                row[col] = float(self.paths.loc[name, col])
                row[f"{col}_ci"] = [float(self.ci[col][0][i]), float(self.ci[col][1][i])]
            rows.append(row)
        return {"n_boot": self.n_boot, "n_failed_resamples": self.n_failed, "level": self.level,
                "seed": self.seed, "paths": rows}  # fmt: skip


def _paths(X: np.ndarray, m: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Rows a, b, direct, indirect, total (each length k) for one dataset."""
    n, k = X.shape
    D1 = np.column_stack([np.ones(n), X])
    a = _lstsq_full_rank(D1, m)[1:]
    D2 = np.column_stack([np.ones(n), m, X])
    beta = _lstsq_full_rank(D2, y)
    b, c = beta[1], beta[2:]
    ind = a * b
    return np.vstack([a, np.full(k, b), c, ind, c + ind])


def _lstsq_full_rank(D: np.ndarray, v: np.ndarray) -> np.ndarray:
    Q, R = np.linalg.qr(D)
    d = np.abs(np.diag(R))
    if d.min() <= RANK_TOL * max(d.max(), 1.0):
        raise SingularDesignError("mediation stage design is rank deficient", _dependent_columns(D))
    return linalg.solve_triangular(R, Q.T @ v)


def mediation_sem(X, m, y, n_boot: int = 1000, seed: int = 0, level: float = 0.95,
                  names: Sequence[str] | None = None) -> MediationFit:  # fmt: skip
    """Two-stage path model: ``m ~ X`` then ``y ~ m + X``.

    The indirect effect of covariate j is a_j * b and its total effect is
    c_j + a_j * b. Intervals are percentile intervals over ``n_boot``
    resamples of rows (districts) drawn with ``numpy.random.default_rng(seed)``;
    resamples whose stages are singular are skipped and counted.

    Raises
    ------
    ConfigurationError
        If ``n_boot < 200``.
    SingularDesignError
        If a stage is singular on the original data.
    """
    if n_boot < 200:
        raise ConfigurationError(f"n_boot must be at least 200, got {n_boot}")
    if isinstance(X, pd.DataFrame):
        names = tuple(X.columns) if names is None else tuple(names)
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    m = np.asarray(m, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    n, k = X.shape
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(k))
    if not (m.size == y.size == n):
        raise ValueError("X, m and y must have the same number of rows")
    point = _paths(X, m, y)
    rng = np.random.default_rng(seed)
    boots = []
    n_failed = 0
    for _ in range(n_boot):
        idx = rng.integers(0, n, size=n)
        try:
            boots.append(_paths(X[idx], m[idx], y[idx]))
        except SingularDesignError:
            n_failed += 1
    cols = ("a", "b", "direct", "indirect", "total")
    alpha = (1.0 - level) / 2.0
    ci = {}
    if boots:
        B = np.stack(boots)  # (n_ok, 5, k)
        lo, hi = np.quantile(B, [alpha, 1.0 - alpha], axis=0)
        ci = {c: (lo[i], hi[i]) for i, c in enumerate(cols)}
    else:
        ci = {c: (np.full(k, np.nan), np.full(k, np.nan)) for c in cols}
    paths = pd.DataFrame(point.T, index=list(names), columns=list(cols))
    return MediationFit(names, paths, ci, n_boot, n_failed, level, seed)


# --- reports ---------------------------------------------------------------------------------


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        return None if not np.isfinite(v) else float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def regression_report(covariates: pd.DataFrame, outcome, outcome_name: str = "outcome",
                      exclude: Sequence[str] = (), final_variables: Sequence[str] | None = None) -> dict:  # fmt: skip
    """Standardize, search all subsets, tabulate criteria, and fit the final model.

    ``exclude`` drops columns before the search. The final model uses
    ``final_variables`` when given, otherwise the best subset of the size
    preferred by most criteria.
    """
    cov = covariates.drop(columns=[c for c in exclude if c in covariates.columns])
    Z = standardize(cov)
    yz = standardize(pd.DataFrame({outcome_name: np.asarray(outcome, dtype=float)}))[outcome_name].to_numpy()
    search = exhaustive_search(Z.to_numpy(), yz, names=list(Z.columns))
    table = criteria_table(search, Z.to_numpy(), yz)
    size, votes = select_size(table)
    chosen = list(final_variables) if final_variables is not None else list(search.best_names(size))
    fit = ols(add_intercept(Z[chosen].to_numpy()), yz, names=["intercept", *chosen])
    crit = selection_criteria(fit, ols(add_intercept(Z.to_numpy()), yz).sigma2)
    return {
        "outcome": outcome_name,
        "n": int(len(yz)),
        "excluded": [c for c in exclude],
        "n_subsets": search.n_subsets,
        "n_singular_subsets": search.n_singular,
        "best_subsets": {str(s): list(search.best_names(s)) for s in sorted(search.best)},
        "criteria": [{k: _jsonable(v) for k, v in row.items()} for row in table.to_dict("records")],
        "selected_size": size,
        "votes": votes,
        "final_variables": chosen,
        "final_model": {
            "coefficients": [{k: _jsonable(v) for k, v in r.items()} for r in fit.coefficient_table().to_dict("records")],
            "r2": fit.r2,
            "adj_r2": fit.adj_r2,
            "pred_r2": fit.pred_r2,
            "aic": crit["aic"],
            "bic": crit["bic"],
            "cp": crit["cp"],
        },
    }


def union_of_selected(reports: Sequence[dict], exclude: Sequence[str] = ()) -> list[str]:
    """Union of the selected variables across regression reports, minus ``exclude``, in first-seen order."""
    seen: list[str] = []
    for r in reports:
        for v in r["final_variables"]:
            if v not in seen and v not in exclude:
                seen.append(v)
    return seen
