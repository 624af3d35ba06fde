"""Generative mobility model: factors, priors, likelihood and log-posterior.

Weekly out-of-home duration of district ``d`` in week ``t`` is modelled as

    D_base,d * W_d(t) * V_d(t) * H_d(t) * C_d(t)

with a Student-t (nu = 4) observation model. District parameters are
non-centred: each is a global location plus a global scale times a
standardized per-district offset. Sampling happens in an unconstrained
space; positive scales are log-transformed and interval-uniform locations
logit-transformed, and the log-Jacobians are part of :func:`log_prior`.

All functions accept plain numpy values or :class:`mobidecomp.diff.Var`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import special, stats

from . import diff as ad
from .errors import DegenerateIncidenceError, DomainError, EvaluationError
from .ingest import MAX_WEEKDAY_COUNT, WeeklyPanel, normalize_incidence

BASELINE_HOURS = 8.0
STUDENT_T_DF = 4.0
KERNEL_LAGS = 10

_LOG_2PI = math.log(2.0 * math.pi)


# --- priors -----------------------------------------------------------------


def _family_logpdf(kind: str, v, a, b):
    """Log density of a prior family; ``a``/``b`` may be arrays matching ``v``."""
    if kind == "normal":
        return -0.5 * ad.square((v - a) / b) - np.log(b) - 0.5 * _LOG_2PI
    if kind == "halfnormal":
        return -0.5 * ad.square(v / a) - np.log(a) - 0.5 * _LOG_2PI + math.log(2.0)
    if kind == "halfcauchy":
        return np.log(2.0 / (math.pi * a)) - ad.log1p(ad.square(v / a))
    if kind == "exponential":
        return np.log(a) - a * v
    if kind == "lognormal":
        lv = ad.log(v)
        return -0.5 * ad.square((lv - a) / b) - np.log(b) - 0.5 * _LOG_2PI - lv
    raise ValueError(f"unknown prior kind {kind!r}")


@dataclass(frozen=True)
class Prior:
    """A univariate prior; ``kind`` selects the family, ``a``/``b`` its parameters.

    normal(mu, sd), halfnormal(sd), halfcauchy(scale), exponential(rate),
    lognormal(mu, sd), uniform(low, high).
    """

    kind: str
    a: float
    b: float = float("nan")

    def logpdf(self, v):
        if self.kind == "uniform":
            return -math.log(self.b - self.a) + 0.0 * v
        return _family_logpdf(self.kind, v, self.a, self.b)

    def scipy(self):
        a, b = self.a, self.b
        return {
            "normal": lambda: stats.norm(a, b),
            "halfnormal": lambda: stats.halfnorm(scale=a),
            "halfcauchy": lambda: stats.halfcauchy(scale=a),
            "exponential": lambda: stats.expon(scale=1.0 / a),
            "lognormal": lambda: stats.lognorm(s=b, scale=math.exp(a)),
            "uniform": lambda: stats.uniform(a, b - a),
        }[self.kind]()

    def sample(self, rng: np.random.Generator, size=None):
        return self.scipy().rvs(size=size, random_state=rng)

    def describe(self) -> dict:
        d = {"family": self.kind, "a": self.a}
        if not math.isnan(self.b):
            d["b"] = self.b
        return d


@dataclass(frozen=True)
class GlobalParameter:
    name: str
    prior: Prior
    transform: str  # identity | log | interval


GLOBALS: tuple[GlobalParameter, ...] = (
    GlobalParameter("mu_base", Prior("normal", 0.0, 0.2), "identity"),
    GlobalParameter("sigma_base", Prior("halfnormal", 0.3), "log"),
    GlobalParameter("mu_W_phi", Prior("halfcauchy", 1.0), "log"),
    GlobalParameter("sigma_W_phi", Prior("exponential", 10.0), "log"),
    GlobalParameter("mu_W_psi", Prior("normal", 15.0, 3.0), "identity"),
    GlobalParameter("sigma_W_psi", Prior("exponential", 10.0), "log"),
    GlobalParameter("mu_W_chi", Prior("normal", math.log(4.0), 0.5), "identity"),
    GlobalParameter("sigma_W_chi", Prior("exponential", 10.0), "log"),
    GlobalParameter("mu_V", Prior("uniform", 0.8, 1.0), "interval"),
    GlobalParameter("sigma_V", Prior("exponential", 10.0), "log"),
    GlobalParameter("mu_H", Prior("uniform", 0.9, 1.0), "interval"),
    GlobalParameter("sigma_H", Prior("halfnormal", 0.25), "log"),
    GlobalParameter("mu_C_phi", Prior("normal", math.log(1.5), 0.25), "identity"),
    GlobalParameter("sigma_C_phi", Prior("exponential", 10.0), "log"),
    GlobalParameter("mu_C_psi", Prior("normal", 30.0, 1.0), "identity"),
    GlobalParameter("sigma_C_psi", Prior("halfnormal", 0.1), "log"),
    GlobalParameter("mu_C_omega", Prior("normal", 0.0, 0.5), "identity"),
    GlobalParameter("mu_C_G", Prior("normal", 3.0, 1.0), "identity"),
    GlobalParameter("sigma_C_G", Prior("halfnormal", 0.25), "log"),
    GlobalParameter("alpha_C_G", Prior("lognormal", math.log(3.0), 0.125), "log"),
    GlobalParameter("sigma_L", Prior("halfcauchy", 2.0), "log"),
)
GLOBAL_NAMES = tuple(g.name for g in GLOBALS)

OFFSETS = (
    "z_base",
    "z_W_phi",
    "z_W_psi",
    "z_W_chi",
    "z_V",
    "z_H",
    "z_C_kappa",
    "z_C_lambda",
    "z_C_omega",
    "z_C_gamma",
)


@dataclass(frozen=True)
class GlobalHypers:
    mu_base: float
    sigma_base: float
    mu_W_phi: float
    sigma_W_phi: float
    mu_W_psi: float
    sigma_W_psi: float
    mu_W_chi: float
    sigma_W_chi: float
    mu_V: float
    sigma_V: float
    mu_H: float
    sigma_H: float
    mu_C_phi: float
    sigma_C_phi: float
    mu_C_psi: float
    sigma_C_psi: float
    mu_C_omega: float
    mu_C_G: float
    sigma_C_G: float
    alpha_C_G: float
    sigma_L: float

    def __post_init__(self):
        for g in GLOBALS:
            v = getattr(self, g.name)
            if g.transform == "log" and not v > 0:
                raise DomainError(f"{g.name} must be positive, got {v}")
            if g.transform == "interval" and not g.prior.a < v < g.prior.b:
                raise DomainError(f"{g.name} must lie in ({g.prior.a}, {g.prior.b}), got {v}")

    def as_dict(self) -> dict[str, float]:
        return {k: float(v) for k, v in asdict(self).items()}

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in GLOBAL_NAMES], dtype=float)

    @classmethod
    def from_dict(cls, d) -> "GlobalHypers":
        return cls(**{n: float(d[n]) for n in GLOBAL_NAMES})

    @classmethod
    def typical(cls) -> "GlobalHypers":
        """A prior-typical parameter set, convenient for simulation."""
        return cls(
            mu_base=0.0, sigma_base=0.1,
            mu_W_phi=0.15, sigma_W_phi=0.05,
            mu_W_psi=15.0, sigma_W_psi=0.1,
            mu_W_chi=math.log(4.0), sigma_W_chi=0.1,
            mu_V=0.9, sigma_V=0.05,
            mu_H=0.95, sigma_H=0.1,
            mu_C_phi=math.log(1.5), sigma_C_phi=0.1,
            mu_C_psi=30.0, sigma_C_psi=0.05,
            mu_C_omega=0.0,
            mu_C_G=3.0, sigma_C_G=0.1, alpha_C_G=3.0,
            sigma_L=0.3,
        )  # fmt: skip


assert [f.name for f in fields(GlobalHypers)] == list(GLOBAL_NAMES)


def sample_prior_hypers(rng: np.random.Generator) -> GlobalHypers:
    return GlobalHypers(**{g.name: float(g.prior.sample(rng)) for g in GLOBALS})


# --- parameter space ----------------------------------------------------------------

_TRANSFORM = np.array([g.transform for g in GLOBALS])
_IS_LOG = _TRANSFORM == "log"
_IS_INTERVAL = _TRANSFORM == "interval"
_LOW = np.array([g.prior.a if g.transform == "interval" else 0.0 for g in GLOBALS])
_WIDTH = np.array([g.prior.b - g.prior.a if g.transform == "interval" else 1.0 for g in GLOBALS])
_FAMILIES = {
    kind: (
        np.array([i for i, g in enumerate(GLOBALS) if g.prior.kind == kind]),
        np.array([g.prior.a for g in GLOBALS if g.prior.kind == kind]),
        np.array([g.prior.b for g in GLOBALS if g.prior.kind == kind]),
    )
    for kind in sorted({g.prior.kind for g in GLOBALS})
}


def _constrain(u):
    v = np.array(u, dtype=float)
    v[..., _IS_LOG] = np.exp(u[..., _IS_LOG])
    v[..., _IS_INTERVAL] = _LOW[_IS_INTERVAL] + _WIDTH[_IS_INTERVAL] * special.expit(u[..., _IS_INTERVAL])
    return v


def _constrain_deriv(u, v):
    d = np.ones_like(v)
    d[..., _IS_LOG] = v[..., _IS_LOG]
    s = special.expit(u[..., _IS_INTERVAL])
    d[..., _IS_INTERVAL] = _WIDTH[_IS_INTERVAL] * s * (1.0 - s)
    return d


def _log_jacobian(u):
    j = np.zeros_like(u, dtype=float)
    j[..., _IS_LOG] = u[..., _IS_LOG]
    ui = u[..., _IS_INTERVAL]
    j[..., _IS_INTERVAL] = np.log(_WIDTH[_IS_INTERVAL]) - np.logaddexp(0, -ui) - np.logaddexp(0, ui)
    return j


def _log_jacobian_deriv(u, j):
    d = np.zeros_like(u, dtype=float)
    d[..., _IS_LOG] = 1.0
    d[..., _IS_INTERVAL] = 1.0 - 2.0 * special.expit(u[..., _IS_INTERVAL])
    return d


def _global_prior(v):
    out = np.zeros_like(v, dtype=float)
    for kind, (idx, a, b) in _FAMILIES.items():
        if kind == "uniform":
            out[..., idx] = -np.log(b - a)
        else:
            out[..., idx] = _family_logpdf(kind, v[..., idx], a, b)
    return out


def _global_prior_deriv(v, y):
    d = np.zeros_like(v, dtype=float)
    for kind, (idx, a, b) in _FAMILIES.items():
        w = v[..., idx]
        if kind == "normal":
            d[..., idx] = -(w - a) / b**2
        elif kind == "halfnormal":
            d[..., idx] = -w / a**2
        elif kind == "halfcauchy":
            d[..., idx] = -2.0 * w / (a**2 + w**2)
        elif kind == "exponential":
            d[..., idx] = -a
        elif kind == "lognormal":
            d[..., idx] = -(np.log(w) - a) / (b**2 * w) - 1.0 / w
    return d


def constrain_globals(u):
    """Map unconstrained globals (..., 21) to their natural support."""
    return ad.elementwise(u, _constrain, _constrain_deriv, "constrain")


def global_log_jacobian(u):
    return ad.sum(ad.elementwise(u, _log_jacobian, _log_jacobian_deriv, "log_jacobian"), axis=-1)


def global_log_prior(v):
    """Sum of prior log densities of constrained globals (..., 21)."""
    return ad.sum(ad.elementwise(v, _global_prior, _global_prior_deriv, "global_prior"), axis=-1)


class ParameterSpace:
    """Layout of the flat unconstrained vector: 21 globals, then 10 offsets per district.

    District blocks follow the order of ``ags`` (district-major, offsets in
    :data:`OFFSETS` order within a block).
    """

    n_globals = len(GLOBALS)
    n_offsets = len(OFFSETS)

    def __init__(self, ags: Sequence[str]):
        self.ags = tuple(ags)
        if len(set(self.ags)) != len(self.ags):
            raise ValueError("district keys must be unique")
        self.names = GLOBAL_NAMES + tuple(f"{o}[{a}]" for a in self.ags for o in OFFSETS)
        self.index = {n: i for i, n in enumerate(self.names)}

    @property
    def n_districts(self) -> int:
        return len(self.ags)

    @property
    def dim(self) -> int:
        return self.n_globals + self.n_offsets * self.n_districts

    def __eq__(self, other) -> bool:
        return isinstance(other, ParameterSpace) and self.ags == other.ags

    def __hash__(self):
        return hash(self.ags)

    def to_unconstrained(self, hypers: GlobalHypers, offsets) -> np.ndarray:
        offsets = np.asarray(offsets, dtype=float).reshape(self.n_districts, self.n_offsets)
        u = hypers.as_array()
        u[_IS_LOG] = np.log(u[_IS_LOG])
        frac = (u[_IS_INTERVAL] - _LOW[_IS_INTERVAL]) / _WIDTH[_IS_INTERVAL]
        u[_IS_INTERVAL] = np.log(frac) - np.log1p(-frac)
        return np.concatenate([u, offsets.ravel()])

    def globals_of(self, x):
        return x[..., : self.n_globals]

    def offsets(self, x):
        """Offsets with shape (..., n_districts, 10)."""
        z = x[..., self.n_globals :]
        shape = np.shape(ad.value_of(x))[:-1] + (self.n_districts, self.n_offsets)
        return z.reshape(shape)

    def split(self, x) -> tuple[GlobalHypers, np.ndarray]:
        """Constrained hypers and offsets for one concrete unconstrained vector."""
        x = np.asarray(x, dtype=float)
        v = _constrain(x[: self.n_globals])
        return GlobalHypers(*map(float, v)), self.offsets(x)

    def layout(self) -> dict:
        params = []
        for g in GLOBALS:
            params.append(
                {"name": g.name, "index": self.index[g.name], "level": "global",
                 "transform": g.transform, "prior": g.prior.describe()}
            )  # fmt: skip
        for a in self.ags:
            for o in OFFSETS:
                n = f"{o}[{a}]"
                params.append(
                    {"name": n, "index": self.index[n], "level": "district", "district": a,
                     "offset": o, "transform": "identity",
                     "prior": {"family": "normal", "a": 0.0, "b": 1.0}}
                )  # fmt: skip
        return {"dim": self.dim, "districts": list(self.ags), "parameters": params}

    def write_layout(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.layout(), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def from_layout(cls, path: str | Path) -> "ParameterSpace":
        return cls(json.loads(Path(path).read_text(encoding="utf-8"))["districts"])


# --- factors ------------------------------------------------------------------


def baseline_duration(mu_base, sigma_base, z_base):
    """Hours per day in a neutral week: 8 * exp(mu + z * sigma)."""
    return BASELINE_HOURS * ad.exp(mu_base + z_base * sigma_base)


def temperature_factor(tmax, phi, psi, chi):
    """Sigmoid temperature multiplier, 1 at ``tmax == psi``, saturating at 1 +/- phi/2."""
    return phi * ad.logistic((tmax - psi) / chi) + (1.0 - phi / 2.0)


def _check_counts(count, what: str) -> None:
    c = np.asarray(count)
    if c.dtype.kind in "iu" or (c.dtype.kind == "f" and np.all(np.mod(c, 1) == 0)):
        if np.any((c < 0) | (c > MAX_WEEKDAY_COUNT)):
            raise DomainError(f"{what} must lie in 0..{MAX_WEEKDAY_COUNT}")
    else:
        raise DomainError(f"{what} must be integer-valued")


def vacation_factor(days, theta_V):
    """Multiplier for ``days`` school-vacation weekdays (0..5) in a 7-day week."""
    _check_counts(days, "school vacation days")
    return (theta_V - 1.0) / 7.0 * days + 1.0


def holiday_factor(count, theta_H):
    """Multiplier for ``count`` public holidays on weekdays (0..5) in a 7-day week."""
    _check_counts(count, "public holiday count")
    return (theta_H - 1.0) / 7.0 * count + 1.0


def gamma_kernel_weights(mu_G, alpha, L: int = KERNEL_LAGS):
    """Causal lag weights: Gamma(shape=alpha, rate=alpha/mu_G) mass per weekly bin [k, k+1).

    Bins 0..L are renormalized to sum to one. ``mu_G`` may be a vector (one
    kernel per district); the lag axis is last.
    """
    edges = np.arange(1, L + 2, dtype=float)
    mu = mu_G if isinstance(mu_G, ad.Var) else np.asarray(mu_G, dtype=float)
    rate = alpha / mu[..., None]
    cdf = ad.gammainc(alpha, rate * edges)
    zero = np.zeros(np.shape(ad.value_of(cdf))[:-1] + (1,))
    if isinstance(cdf, ad.Var):
        lower = ad.concatenate([zero, cdf[..., :-1]], axis=-1)
        total = cdf[..., -1:]
    else:
        lower = np.concatenate([zero, cdf[..., :-1]], axis=-1)
        total = cdf[..., -1:]
    return (cdf - lower) / total


def lagged(series, L: int = KERNEL_LAGS) -> np.ndarray:
    """Array with ``out[..., t, k] = series[..., t - k]`` (zero before the window)."""
    series = np.asarray(series, dtype=float)
    T = series.shape[-1]
    out = np.zeros(series.shape + (L + 1,))
    for k in range(min(L + 1, T)):
        out[..., k:, k] = series[..., : T - k]
    return out


def disease_signal(N_d, N_nat, omega, weights):
    """Gamma-convolved mix ``omega * N_d + (1 - omega) * N_nat`` for one district."""
    N_d = np.asarray(N_d, dtype=float)
    N_nat = np.asarray(N_nat, dtype=float)
    w = weights
    conv_local = ad.sum(lagged(N_d) * w, axis=-1)
    conv_nat = ad.sum(lagged(N_nat) * w, axis=-1)
    return omega * conv_local + (1.0 - omega) * conv_nat


def disease_factor(s, kappa, lam, t):
    """exp(-kappa * exp(-t / lam) * s): reduction fading with calendar time ``t``."""
    return ad.exp(-kappa * ad.exp(-t / lam) * s)


def student_t_logpdf(x, loc, scale, df: float = STUDENT_T_DF):
    """Elementwise Student-t log density."""
    z = (x - loc) / scale
    const = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    return const - ad.log(scale) - (df + 1) / 2 * ad.log1p(ad.square(z) / df)


def log_likelihood(predicted, observed, sigma_L, df: float = STUDENT_T_DF):
    """Sum over cells of the Student-t(df) log density of ``observed`` around ``predicted``."""
    observed = np.asarray(observed, dtype=float)
    r = observed - predicted
    n = observed.size
    const = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    z2 = ad.square(r) / (df * ad.square(sigma_L))
    return n * const - n * ad.log(sigma_L) - (df + 1) / 2 * ad.sum(ad.log1p(z2))


# --- model data and composition -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ModelData:
    """Panel arrays pre-arranged for repeated density evaluation."""

    observed: np.ndarray  # (D, T)
    tmax: np.ndarray
    vacation_days: np.ndarray
    holiday_count: np.ndarray
    local_lagged: np.ndarray  # (D, T, L+1)
    national_lagged: np.ndarray  # (T, L+1)
    weeks: np.ndarray  # (T,), 1-based
    kernel_lags: int = KERNEL_LAGS

    @classmethod
    def from_panel(cls, panel: WeeklyPanel, L: int = KERNEL_LAGS) -> "ModelData":
        try:
            n_local, n_nat = normalize_incidence(panel.incidence_local, panel.incidence_national)
        except DegenerateIncidenceError:
            # no epidemic signal: the disease factor is exactly one
            n_local = np.zeros_like(panel.incidence_local)
            n_nat = np.zeros_like(panel.incidence_national)
        return cls(
            observed=np.asarray(panel.duration, dtype=float),
            tmax=np.asarray(panel.tmax, dtype=float),
            vacation_days=np.asarray(panel.vacation_days, dtype=float),
            holiday_count=np.asarray(panel.holiday_count, dtype=float),
            local_lagged=lagged(n_local, L),
            national_lagged=lagged(n_nat, L),
            weeks=np.arange(1, panel.n_weeks + 1, dtype=float),
            kernel_lags=L,
        )

    @property
    def aux(self) -> dict:
        """Derived arrays reused by every likelihood evaluation (computed once)."""
        cached = self.__dict__.get("_aux")
        if cached is None:
            cached = {
                "av": self.vacation_days / 7.0,
                "ah": self.holiday_count / 7.0,
                "nat_t": np.ascontiguousarray(self.national_lagged.T),  # (L+1, T)
                "contrast": self.local_lagged - self.national_lagged,  # (D, T, L+1)
                "weeks": self.weeks[None, :],
            }
            object.__setattr__(self, "_aux", cached)
        return cached


_G = {n: i for i, n in enumerate(GLOBAL_NAMES)}
# location and scale of each offset column; index n_globals points at a constant 1
_LOC_IDX = np.array([_G[n] for n in (
    "mu_base", "mu_W_phi", "mu_W_psi", "mu_W_chi", "mu_V", "mu_H",
    "mu_C_phi", "mu_C_psi", "mu_C_omega", "mu_C_G")])  # fmt: skip
_SCALE_IDX = np.array([_G[n] for n in (
    "sigma_base", "sigma_W_phi", "sigma_W_psi", "sigma_W_chi", "sigma_V", "sigma_H",
    "sigma_C_phi", "sigma_C_psi")] + [len(GLOBALS), _G["sigma_C_G"]])  # fmt: skip

COLUMNS = ("D_base", "phi_W", "psi_W", "chi_W", "theta_V", "theta_H",
           "kappa_C", "lambda_C", "omega_C", "mu_G")  # fmt: skip
_C = {n: j for j, n in enumerate(COLUMNS)}
_EXP_COLS = np.array([0, 3, 6])
_SOFTPLUS_COLS = np.array([7, 9])
_LOGISTIC_COLS = np.array([8])


def _columns(lin):
    p = np.array(lin, dtype=float)
    p[..., _EXP_COLS] = np.exp(lin[..., _EXP_COLS])
    p[..., 0] *= BASELINE_HOURS
    p[..., _SOFTPLUS_COLS] = np.logaddexp(0.0, lin[..., _SOFTPLUS_COLS])
    p[..., _LOGISTIC_COLS] = special.expit(lin[..., _LOGISTIC_COLS])
    return p


def _columns_deriv(lin, p):
    d = np.ones_like(p)
    d[..., _EXP_COLS] = p[..., _EXP_COLS]
    d[..., _SOFTPLUS_COLS] = special.expit(lin[..., _SOFTPLUS_COLS])
    q = p[..., _LOGISTIC_COLS]
    d[..., _LOGISTIC_COLS] = q * (1.0 - q)
    return d


def district_matrix(v, z):
    """Constrained district parameters (..., D, 10) in :data:`COLUMNS` order.

    ``v`` holds constrained globals (..., 21); ``z`` the offsets (..., D, 10).
    The omega column has unit scale; the others are location + scale * offset.
    """
    ones = np.ones(np.shape(ad.value_of(v))[:-1] + (1,))
    v_ext = ad.concatenate([v, ones], axis=-1)
    loc = v_ext[..., None, _LOC_IDX]
    scale = v_ext[..., None, _SCALE_IDX]
    return ad.elementwise(loc + scale * z, _columns, _columns_deriv, "district_columns")


def district_params(x, space: ParameterSpace) -> dict:
    """Named constrained parameters for an unconstrained vector or a batch (S, dim).

    District-level entries have shape (..., D); ``alpha_G`` and ``sigma_L``
    are global.
    """
    x = np.asarray(x, dtype=float)
    v = _constrain(space.globals_of(x))
    P = district_matrix(v, space.offsets(x))
    out = {n: P[..., j] for n, j in _C.items()}
    out["sigma_G"] = out["mu_G"] / np.sqrt(v[..., _G["alpha_C_G"], None])
    out["alpha_G"] = v[..., _G["alpha_C_G"]]
    out["sigma_L"] = v[..., _G["sigma_L"]]
    return out


def _kernel(mu_G, alpha, L):
    a = ad.value_of(alpha)
    if np.ndim(a) == 0:
        return gamma_kernel_weights(mu_G, alpha, L)
    # batch of draws, each with its own shape parameter
    flat_a = np.reshape(a, -1)
    flat_mu = np.reshape(mu_G, (flat_a.size, -1))
    w = np.stack([gamma_kernel_weights(flat_mu[s], flat_a[s], L) for s in range(flat_a.size)])
    return w.reshape(np.shape(mu_G) + (L + 1,))


def factors_from(v, P, data: ModelData) -> dict:
    """Multiplicative factors W, V, H, C with shape (..., D, T)."""
    col = lambda n: P[..., _C[n] : _C[n] + 1]  # noqa: E731  (..., D, 1)
    W = temperature_factor(data.tmax, col("phi_W"), col("psi_W"), col("chi_W"))
    V = (col("theta_V") - 1.0) * (data.vacation_days / 7.0) + 1.0
    H = (col("theta_H") - 1.0) * (data.holiday_count / 7.0) + 1.0
    alpha = v[..., _G["alpha_C_G"]]
    w = _kernel(P[..., _C["mu_G"]], alpha, data.kernel_lags)[..., None, :]  # (..., D, 1, K)
    conv_local = ad.sum(data.local_lagged * w, axis=-1)
    conv_nat = ad.sum(data.national_lagged * w, axis=-1)
    s = conv_nat + col("omega_C") * (conv_local - conv_nat)
    C = disease_factor(s, col("kappa_C"), col("lambda_C"), data.weeks)
    return {"W": W, "V": V, "H": H, "C": C}


def factors(x, space: ParameterSpace, data: ModelData) -> dict:
    x = np.asarray(x, dtype=float)
    v = _constrain(space.globals_of(x))
    return factors_from(v, district_matrix(v, space.offsets(x)), data)


def predict_from(v, P, data: ModelData, f: dict | None = None):
    f = factors_from(v, P, data) if f is None else f
    return P[..., 0:1] * f["W"] * f["V"] * f["H"] * f["C"]


# --- fused primitives for the traced density --------------------------------------------
#
# The composable factor functions above record one tape node per arithmetic
# step; for sampling, the kernel and the whole likelihood are single nodes
# with hand-derived adjoints (checked against finite differences in tests).


def _family_index(*kinds):
    return np.array([i for i, g in enumerate(GLOBALS) if g.prior.kind in kinds], dtype=np.intp)


_Q_IDX = _family_index("normal", "halfnormal", "lognormal")
_Q_LOC = np.array([0.0 if GLOBALS[i].prior.kind == "halfnormal" else GLOBALS[i].prior.a for i in _Q_IDX])
_Q_SCALE = np.array([GLOBALS[i].prior.a if GLOBALS[i].prior.kind == "halfnormal" else GLOBALS[i].prior.b
                     for i in _Q_IDX])  # fmt: skip
_Q_ON_LOG = np.array([GLOBALS[i].prior.kind == "lognormal" for i in _Q_IDX])  # density of log v
_CAUCHY_IDX = _family_index("halfcauchy")
_CAUCHY_SCALE = np.array([GLOBALS[i].prior.a for i in _CAUCHY_IDX])
_EXP_IDX = _family_index("exponential")
_EXP_RATE = np.array([GLOBALS[i].prior.a for i in _EXP_IDX])
_LN_IDX = _family_index("lognormal")
_LOG_IDX = np.flatnonzero(_IS_LOG)
_INT_IDX = np.flatnonzero(_IS_INTERVAL)


def _prior_constant() -> float:
    """The parameter-free part of the global log prior plus Jacobian."""
    c = 0.0
    for g in GLOBALS:
        p = g.prior
        if p.kind in ("normal", "lognormal"):
            c += -math.log(p.b) - 0.5 * _LOG_2PI
        elif p.kind == "halfnormal":
            c += -math.log(p.a) - 0.5 * _LOG_2PI + math.log(2.0)
        elif p.kind == "halfcauchy":
            c += math.log(2.0 / (math.pi * p.a))
        elif p.kind == "exponential":
            c += math.log(p.a)
        elif p.kind == "uniform":
            c += -math.log(p.b - p.a)
        if g.transform == "interval":
            c += math.log(p.b - p.a)
    return c


_PRIOR_CONST = _prior_constant()


def prior_node(x, space: "ParameterSpace"):
    """Joint log prior of one unconstrained vector ``x`` as a single tape node.

    Equal to :func:`log_prior`; the global priors, the Jacobians of the
    transforms and the standard-normal offsets are evaluated in one
    vectorized pass with a hand-derived gradient.
    """
    xv = np.asarray(ad.value_of(x), dtype=float)
    k = space.n_globals
    u = xv[:k]
    v = _constrain(u)
    dv = _constrain_deriv(u, v)
    grad = np.zeros_like(xv)
    gu = grad[:k]
    # normal-type families on v (or on log v = u for the lognormal)
    t = np.where(_Q_ON_LOG, u[_Q_IDX], v[_Q_IDX])
    zq = (t - _Q_LOC) / _Q_SCALE
    gu[_Q_IDX] += -zq / _Q_SCALE * np.where(_Q_ON_LOG, 1.0, dv[_Q_IDX])
    vc = v[_CAUCHY_IDX] / _CAUCHY_SCALE
    gu[_CAUCHY_IDX] += -2.0 * vc / (_CAUCHY_SCALE * (1.0 + vc * vc)) * dv[_CAUCHY_IDX]
    gu[_EXP_IDX] += -_EXP_RATE * dv[_EXP_IDX]
    gu[_LN_IDX] -= 1.0  # lognormal density carries 1 / v
    gu[_LOG_IDX] += 1.0  # Jacobian of v = exp(u)
    ui = u[_INT_IDX]
    gu[_INT_IDX] += 1.0 - 2.0 * special.expit(ui)
    z = xv[k:]
    grad[k:] = -z
    value = (
        _PRIOR_CONST
        - 0.5 * float(zq @ zq)
        - float(np.log1p(vc * vc).sum())
        - float(_EXP_RATE @ v[_EXP_IDX])
        - float(u[_LN_IDX].sum())
        + float(u[_LOG_IDX].sum())
        - float(np.logaddexp(0.0, -ui).sum() + np.logaddexp(0.0, ui).sum())
        - 0.5 * float(z @ z)
        - 0.5 * _LOG_2PI * z.size
    )
    if not isinstance(x, ad.Var):
        return value
    return ad.primitive("log_prior", np.asarray(value), (x, lambda g: g * grad))


def district_node(v, z):
    """:func:`district_matrix` for one parameter vector as a single tape node.

    ``v`` are the constrained globals ``(21,)`` and ``z`` the offsets ``(D, 10)``.
    """
    vv = np.asarray(ad.value_of(v), dtype=float)
    zv = np.asarray(ad.value_of(z), dtype=float)
    v_ext = np.append(vv, 1.0)
    scale = v_ext[_SCALE_IDX]
    lin = v_ext[_LOC_IDX] + scale * zv
    P = _columns(lin)
    if not isinstance(v, ad.Var) and not isinstance(z, ad.Var):
        return P
    dcol = _columns_deriv(lin, P)

    def v_adjoint(g):
        gl = g * dcol
        out = np.zeros(v_ext.size)
        out[_LOC_IDX] += gl.sum(axis=0)
        out[_SCALE_IDX] += (gl * zv).sum(axis=0)
        return out[:-1]

    return ad.primitive("district_matrix", P, (v, v_adjoint), (z, lambda g: g * dcol * scale))


def kernel_node(mu_G, alpha, L: int = KERNEL_LAGS):
    """Gamma lag weights ``(D, L+1)`` for district means ``mu_G (D,)`` and scalar shape ``alpha``."""
    m = np.asarray(ad.value_of(mu_G), dtype=float)[:, None]
    a = float(ad.value_of(alpha))
    e = np.arange(1, L + 2, dtype=float)
    xk = a * e / m
    cdf = special.gammainc(a, xk)
    lower = np.concatenate([np.zeros((m.shape[0], 1)), cdf[:, :-1]], axis=1)
    total = cdf[:, -1:]
    mass = cdf - lower
    w = mass / total
    if not isinstance(mu_G, ad.Var) and not isinstance(alpha, ad.Var):
        return w
    dens = np.exp((a - 1.0) * np.log(xk) - xk - special.gammaln(a))
    d_m = dens * (-xk / m)
    d_a = ad._gammainc_dshape(a, xk) + dens * (xk / a)

    def cdf_adjoint(g):
        up = np.concatenate([g[:, 1:], np.zeros((g.shape[0], 1))], axis=1)
        gc = (g - up) / total
        gc[:, -1] -= np.sum(g * mass, axis=1) / total[:, 0] ** 2
        return gc

    return ad.primitive(
        "gamma_kernel",
        w,
        (mu_G, lambda g: np.sum(cdf_adjoint(g) * d_m, axis=1)),
        (alpha, lambda g: np.sum(cdf_adjoint(g) * d_a)),
    )


def likelihood_node(P, weights, sigma, data: ModelData, df: float = STUDENT_T_DF):
    """Student-t log-likelihood of the observed panel under district parameters ``P (D, 10)``."""
    Pv = np.asarray(ad.value_of(P), dtype=float)
    wv = np.asarray(ad.value_of(weights), dtype=float)
    sv = float(ad.value_of(sigma))
    aux = data.aux
    D0, phi, psi, chi, thV, thH, kappa, lam, omega = (Pv[:, j, None] for j in range(9))
    u = (data.tmax - psi) / chi
    sg = special.expit(u)
    W = phi * sg + (1.0 - 0.5 * phi)
    V = (thV - 1.0) * aux["av"] + 1.0
    H = (thH - 1.0) * aux["ah"] + 1.0
    conv_nat = wv @ aux["nat_t"]  # (D, T)
    contrast = np.matmul(aux["contrast"], wv[:, :, None])[..., 0]  # local minus national, (D, T)
    s = conv_nat + omega * contrast
    E = np.exp(-aux["weeks"] / lam)
    kE = kappa * E
    C = np.exp(-kE * s)
    WV, HC = W * V, H * C
    pred = D0 * WV * HC
    r = (data.observed - pred) / sv
    r2 = r * r
    const = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    n = r.size
    value = n * (const - math.log(sv)) - (df + 1) / 2 * float(np.log1p(r2 / df).sum())
    if not (isinstance(P, ad.Var) or isinstance(weights, ad.Var) or isinstance(sigma, ad.Var)):
        return value

    q = (df + 1) / (sv * (df + r2))
    g_pred = q * r  # d value / d pred
    g_sigma = float((q * r2).sum()) - n / sv
    gp = g_pred * pred  # d value / d log(factor), shared by all factors
    g_s = -gp * kE
    gW = g_pred * D0 * V * HC
    gWs = gW * phi * sg * (1.0 - sg) / chi
    gDVH = g_pred * D0 * WV
    terms = np.stack([
        gp / D0,
        gW * (sg - 0.5),
        -gWs,
        -gWs * u,
        g_pred * D0 * W * HC * aux["av"],
        gDVH * C * aux["ah"],
        -gp * E * s,
        g_s * s * aux["weeks"] / lam**2,
        g_s * contrast,
    ])  # fmt: skip
    dP = np.zeros_like(Pv)
    dP[:, :9] = terms.sum(axis=2).T

    def weight_adjoint(g):
        gs = g * g_s
        return gs @ aux["nat_t"].T + np.matmul((gs * omega)[:, None, :], aux["contrast"])[:, 0, :]

    return ad.primitive(
        "student_t_likelihood",
        np.asarray(value),
        (P, lambda g: g * dP),
        (weights, weight_adjoint),
        (sigma, lambda g: g * g_sigma),
    )


def log_prior(x, space: ParameterSpace):
    """Joint log prior density in unconstrained coordinates (Jacobians included)."""
    if not isinstance(x, ad.Var):
        x = np.asarray(x, dtype=float)
        if not np.isfinite(x).all():
            raise EvaluationError("non-finite coordinate in parameter vector")
    u = space.globals_of(x)
    v = constrain_globals(u)
    return _log_prior_terms(x, u, v, space)


def _log_prior_terms(x, u, v, space):
    z = x[..., space.n_globals :]
    n_z = space.n_districts * space.n_offsets
    zz = ad.sum(ad.square(z), axis=-1)
    return global_log_jacobian(u) + global_log_prior(v) - 0.5 * zz - 0.5 * _LOG_2PI * n_z


class PosteriorModel:
    """Unnormalized log-posterior over the unconstrained parameter vector.

    ``likelihood_scale`` multiplies sigma_L inside the likelihood only; it is
    1 for the real model and exists for fault-injection checks.
    """

    def __init__(self, panel: WeeklyPanel, likelihood_scale: float = 1.0, kernel_lags: int = KERNEL_LAGS):
        self.panel = panel
        self.space = ParameterSpace(panel.ags)
        self.data = ModelData.from_panel(panel, kernel_lags)
        self.likelihood_scale = float(likelihood_scale)

    @property
    def dim(self) -> int:
        return self.space.dim

    def _terms(self, x):
        v = constrain_globals(self.space.globals_of(x))
        lp = prior_node(x, self.space)
        P = district_node(v, self.space.offsets(x))
        sigma = v[..., _G["sigma_L"]]
        if self.likelihood_scale != 1.0:
            sigma = sigma * self.likelihood_scale
        w = kernel_node(P[..., _C["mu_G"]], v[..., _G["alpha_C_G"]], self.data.kernel_lags)
        return lp, likelihood_node(P, w, sigma, self.data)

    def log_prior(self, x) -> float:
        return float(self._checked(x)[0])

    def log_likelihood(self, x) -> float:
        return float(self._checked(x)[1])

    def _checked(self, x):
        x = np.asarray(x, dtype=float)
        if not np.isfinite(x).all():
            raise EvaluationError("non-finite coordinate in parameter vector")
        with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
            return self._terms(x)

    def logp(self, x) -> float:
        lp, ll = self._checked(x)
        value = float(lp + ll)
        if not np.isfinite(value):
            raise EvaluationError("log posterior is not finite")
        return value

    def _traced(self, x):
        lp, ll = self._terms(x)
        return lp + ll

    def logp_and_grad(self, x) -> tuple[float, np.ndarray]:
        return ad.grad(self._traced, x)

    __call__ = logp_and_grad

    def params(self, x) -> dict:
        return district_params(x, self.space)

    def factors(self, x) -> dict:
        return factors(x, self.space, self.data)

    def predict(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        v = _constrain(self.space.globals_of(x))
        return predict_from(v, district_matrix(v, self.space.offsets(x)), self.data)


def log_posterior(x, space: ParameterSpace, panel: WeeklyPanel) -> float:
    """log_prior + log_likelihood for ``panel`` (whose districts must match ``space``)."""
    if tuple(panel.ags) != space.ags:
        raise ValueError("panel districts do not match the parameter space")
    return PosteriorModel(panel).logp(x)


def predict_duration(panel: WeeklyPanel, hypers: GlobalHypers, offsets, district: int | str, week: int) -> float:
    """Expected hours/day for one district (position or key) and 1-based week."""
    space = ParameterSpace(panel.ags)
    d = panel.ags.index(district) if isinstance(district, str) else int(district)
    x = space.to_unconstrained(hypers, offsets)
    v = _constrain(space.globals_of(x))
    pred = predict_from(v, district_matrix(v, space.offsets(x)), ModelData.from_panel(panel))
    return float(pred[d, week - 1])
