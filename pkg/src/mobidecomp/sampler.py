"""No-U-Turn sampling with windowed warmup adaptation and multi-chain orchestration.

The transition is the multinomial variant of NUTS: the trajectory doubles in
a random direction until the generalized no-U-turn criterion fails (checked
across the whole trajectory and across neighbouring sub-trajectories) or the
maximum depth is hit, and the draw is taken from the trajectory with weights
proportional to exp(-H). Warmup follows the usual three-phase schedule: a
fast initial buffer, doubling slow windows that estimate a diagonal inverse
metric, and a final fast buffer, with dual-averaging step-size adaptation
throughout.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import AdaptationFailure, ConfigurationError, EvaluationError, UndefinedDiagnosticError

log = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], "tuple[float, np.ndarray]"]

MAX_ENERGY_ERROR = 1000.0
MIN_TUNE = 100
RHAT_THRESHOLD = 1.07
RHAT_STRICT = 1.01


@dataclass(frozen=True)
class ChainConfig:
    n_chains: int = 4
    n_tune: int = 2000
    n_draws: int = 1000
    max_tree_depth: int = 10
    target_accept: float = 0.8
    seed: int = 0

    def __post_init__(self):
        for name in ("n_chains", "n_draws"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.n_tune < MIN_TUNE:
            raise ConfigurationError(f"n_tune must be at least {MIN_TUNE}, got {self.n_tune}")
        if self.max_tree_depth < 0:
            raise ConfigurationError("max_tree_depth must be non-negative")
        if not 0.0 < self.target_accept < 1.0:
            raise ConfigurationError("target_accept must lie in (0, 1)")


@dataclass
class State:
    """Position with its log density and gradient."""

    q: np.ndarray
    logp: float
    grad: np.ndarray


def _evaluate(grad_fn: GradFn, q: np.ndarray):
    """Log density and gradient, or ``None`` where the density is not finite."""
    try:
        logp, g = grad_fn(q)
    except (EvaluationError, FloatingPointError, OverflowError, ValueError):
        return None
    if not (math.isfinite(logp) and np.isfinite(g).all()):
        return None
    return logp, g


def leapfrog(position, momentum, step_size, inverse_mass_diag, grad_fn: GradFn, grad=None):
    """One velocity-Verlet step of Hamiltonian dynamics for potential -log p.

    Returns ``(position, momentum, logp, grad)`` at the end of the step;
    ``logp`` is ``-inf`` (and the momentum update incomplete) when the
    density cannot be evaluated there, which callers treat as divergence.
    ``grad`` may carry the gradient at ``position`` to save an evaluation.
    """
    q = np.asarray(position, dtype=float)
    p = np.asarray(momentum, dtype=float)
    if grad is None:
        ev = _evaluate(grad_fn, q)
        if ev is None:
            return q, p, -math.inf, np.full_like(q, np.nan)
        grad = ev[1]
    p_half = p + 0.5 * step_size * grad
    q_new = q + step_size * inverse_mass_diag * p_half
    ev = _evaluate(grad_fn, q_new)
    if ev is None:
        return q_new, p_half, -math.inf, np.full_like(q, np.nan)
    logp, g = ev
    return q_new, p_half + 0.5 * step_size * g, logp, g


@dataclass
class _Tree:
    """Summary of a built sub-trajectory (``beg`` nearest the start, ``end`` farthest)."""

    edge: tuple  # (q, p, logp, grad) of the last integrated point
    p_beg: np.ndarray
    p_end: np.ndarray
    p_sharp_beg: np.ndarray
    p_sharp_end: np.ndarray
    rho: np.ndarray
    log_weight: float
    proposal: State
    valid: bool
    n_leapfrog: int = 0
    sum_accept: float = 0.0
    divergent: bool = False


def _no_u_turn(p_sharp_minus, p_sharp_plus, rho) -> bool:
    return float(p_sharp_plus @ rho) > 0.0 and float(p_sharp_minus @ rho) > 0.0


class _Integrator:
    def __init__(self, grad_fn, step_size, inv_mass, H0, rng):
        self.grad_fn = grad_fn
        self.step = step_size
        self.inv_mass = inv_mass
        self.H0 = H0
        self.rng = rng

    def build(self, edge, depth: int, direction: int) -> _Tree:
        if depth == 0:
            q, p, logp, g = edge
            q, p, logp, g = leapfrog(q, p, direction * self.step, self.inv_mass, self.grad_fn, g)
            if math.isfinite(logp):
                H = -logp + 0.5 * float(p @ (self.inv_mass * p))
            else:
                H = math.inf
            delta = self.H0 - H  # log weight relative to the start
            divergent = not math.isfinite(H) or -delta > MAX_ENERGY_ERROR
            p_sharp = self.inv_mass * p
            return _Tree(
                edge=(q, p, logp, g),
                p_beg=p, p_end=p, p_sharp_beg=p_sharp, p_sharp_end=p_sharp,
                rho=p.copy(),
                log_weight=delta if math.isfinite(delta) else -math.inf,
                proposal=State(q, logp, g),
                valid=not divergent,
                n_leapfrog=1,
                sum_accept=math.exp(min(delta, 0.0)) if math.isfinite(delta) else 0.0,
                divergent=divergent,
            )  # fmt: skip

        left = self.build(edge, depth - 1, direction)
        if not left.valid:
            return left
        right = self.build(left.edge, depth - 1, direction)
        n = left.n_leapfrog + right.n_leapfrog
        acc = left.sum_accept + right.sum_accept
        if not right.valid:
            right.n_leapfrog, right.sum_accept = n, acc
            return right

        log_weight = np.logaddexp(left.log_weight, right.log_weight)
        proposal = left.proposal
        if self.rng.uniform() < math.exp(right.log_weight - log_weight):
            proposal = right.proposal
        rho = left.rho + right.rho
        valid = (
            _no_u_turn(left.p_sharp_beg, right.p_sharp_end, rho)
            and _no_u_turn(left.p_sharp_beg, right.p_sharp_beg, left.rho + right.p_beg)
            and _no_u_turn(left.p_sharp_end, right.p_sharp_end, right.rho + left.p_end)
        )
        return _Tree(
            edge=right.edge,
            p_beg=left.p_beg, p_end=right.p_end,
            p_sharp_beg=left.p_sharp_beg, p_sharp_end=right.p_sharp_end,
            rho=rho, log_weight=float(log_weight), proposal=proposal, valid=valid,
            n_leapfrog=n, sum_accept=acc,
        )  # fmt: skip


def nuts_draw(state: State, grad_fn: GradFn, step_size: float, inverse_mass_diag, max_tree_depth: int,
              rng: np.random.Generator) -> tuple[State, dict]:  # fmt: skip
    """One multinomial NUTS transition from ``state``.

    ``max_tree_depth`` bounds the number of trajectory doublings; a value of
    0 still builds the single-leaf tree, which reduces to one leapfrog step
    with a Metropolis accept/reject.
    """
    inv_mass = np.asarray(inverse_mass_diag, dtype=float)
    p0 = rng.standard_normal(state.q.shape) / np.sqrt(inv_mass)
    H0 = -state.logp + 0.5 * float(p0 @ (inv_mass * p0))
    integ = _Integrator(grad_fn, step_size, inv_mass, H0, rng)

    start = (state.q, p0, state.logp, state.grad)
    fwd_edge = bck_edge = start
    p_sharp0 = inv_mass * p0
    # momenta at the four ends of the backward and forward halves
    p_fwd_bck = p_fwd_fwd = p_bck_fwd = p_bck_bck = p0
    ps_fwd_bck = ps_fwd_fwd = ps_bck_fwd = ps_bck_bck = p_sharp0
    rho = p0.copy()
    log_weight = 0.0
    sample = state
    n_leapfrog, sum_accept, divergent = 0, 0.0, False
    depth = 0
    max_depth = max(1, max_tree_depth)

    while depth < max_depth:
        if rng.uniform() > 0.5:
            rho_bck = rho
            p_bck_fwd, ps_bck_fwd = p_fwd_fwd, ps_fwd_fwd
            tree = integ.build(fwd_edge, depth, +1)
            fwd_edge = tree.edge
            rho_fwd = tree.rho
            p_fwd_bck, p_fwd_fwd = tree.p_beg, tree.p_end
            ps_fwd_bck, ps_fwd_fwd = tree.p_sharp_beg, tree.p_sharp_end
        else:
            rho_fwd = rho
            p_fwd_bck, ps_fwd_bck = p_bck_bck, ps_bck_bck
            tree = integ.build(bck_edge, depth, -1)
            bck_edge = tree.edge
            rho_bck = tree.rho
            p_bck_fwd, p_bck_bck = tree.p_beg, tree.p_end
            ps_bck_fwd, ps_bck_bck = tree.p_sharp_beg, tree.p_sharp_end

        n_leapfrog += tree.n_leapfrog
        sum_accept += tree.sum_accept
        depth += 1
        if not tree.valid:
            divergent = tree.divergent
            break
        # biased progressive sampling favours the new half
        if tree.log_weight > log_weight or rng.uniform() < math.exp(tree.log_weight - log_weight):
            sample = tree.proposal
        log_weight = float(np.logaddexp(log_weight, tree.log_weight))
        rho = rho_bck + rho_fwd
        if not (
            _no_u_turn(ps_bck_bck, ps_fwd_fwd, rho)
            and _no_u_turn(ps_bck_bck, ps_fwd_bck, rho_bck + p_fwd_bck)
            and _no_u_turn(ps_bck_fwd, ps_fwd_fwd, rho_fwd + p_bck_fwd)
        ):
            break

    stats = {
        "step_size": float(step_size),
        "tree_depth": depth,
        "n_leapfrog": n_leapfrog,
        "accept_stat": sum_accept / max(n_leapfrog, 1),
        "divergent": bool(divergent),
        "logp": float(sample.logp),
        "energy": float(H0),
    }
    return sample, stats


# --- adaptation ----------------------------------------------------------------------


class DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance rate.

    ``gamma`` is larger than the customary 0.05: with the short final warmup
    buffer the iterates otherwise fluctuate so widely that the averaged step
    lands well below the target, and the realized acceptance overshoots it.
    """

    def __init__(self, step_size: float, target: float, gamma=0.15, t0=10.0, kappa=0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(step_size)

    def restart(self, step_size: float) -> None:
        self.mu = math.log(10.0 * step_size)
        self.count = 0
        self.s_bar = 0.0
        self.x_bar = 0.0
        self.x = math.log(step_size)

    def update(self, accept_stat: float) -> float:
        self.count += 1
        eta = 1.0 / (self.count + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept_stat)
        self.x = self.mu - self.s_bar * math.sqrt(self.count) / self.gamma
        w = self.count ** (-self.kappa)
        self.x_bar = w * self.x + (1.0 - w) * self.x_bar
        return math.exp(self.x)

    @property
    def final_step_size(self) -> float:
        return math.exp(self.x_bar)


class RunningVariance:
    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def regularized(self) -> np.ndarray:
        n = self.n
        var = self.m2 / max(n - 1, 1)
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


def adaptation_windows(n_tune: int, init_buffer=75, term_buffer=50, base_window=25) -> list[int]:
    """Iteration indices (0-based, exclusive end) at which slow windows close."""
    if init_buffer + term_buffer + base_window > n_tune:
        init_buffer = int(0.15 * n_tune)
        term_buffer = int(0.1 * n_tune)
        base_window = n_tune - init_buffer - term_buffer
    ends = []
    start, size = init_buffer, base_window
    slow_end = n_tune - term_buffer
    while start < slow_end:
        end = start + size
        if end + 2 * size > slow_end:
            end = slow_end
        ends.append(end)
        start, size = end, 2 * size
    return ends


def find_reasonable_step_size(state: State, grad_fn: GradFn, inv_mass, rng, step_size=1.0) -> float:
    p = rng.standard_normal(state.q.shape) / np.sqrt(inv_mass)
    H0 = -state.logp + 0.5 * float(p @ (inv_mass * p))

    def log_ratio(eps):
        _, p1, logp, _ = leapfrog(state.q, p, eps, inv_mass, grad_fn, state.grad)
        if not math.isfinite(logp):
            return -math.inf
        return H0 - (-logp + 0.5 * float(p1 @ (inv_mass * p1)))

    direction = 1 if log_ratio(step_size) > math.log(0.8) else -1
    for _ in range(100):
        nxt = step_size * (2.0 if direction > 0 else 0.5)
        r = log_ratio(nxt)
        if (direction > 0 and not r > math.log(0.8)) or (direction < 0 and r > math.log(0.8)):
            return nxt if direction < 0 else step_size
        step_size = nxt
        if step_size < 1e-12 or step_size > 1e7:
            break
    return step_size


def curvature_metric(grad_fn: GradFn, q: np.ndarray, lo: float = 1e-4, hi: float = 1e2) -> np.ndarray:
    """Initial diagonal inverse metric from the curvature of log p at ``q``.

    Each entry is ``-1 / (d^2 log p / dq_i^2)`` from central differences of
    the gradient, clipped to ``[lo, hi]``; directions with non-negative
    curvature (or failed evaluations) get 1.
    """
    inv = np.ones_like(q)
    for i in range(q.size):
        h = 1e-4 * max(1.0, abs(q[i]))
        e = np.zeros_like(q)
        e[i] = h
        plus, minus = _evaluate(grad_fn, q + e), _evaluate(grad_fn, q - e)
        if plus is None or minus is None:
            continue
        c = (plus[1][i] - minus[1][i]) / (2.0 * h)
        if c < 0:
            inv[i] = -1.0 / c
    return np.clip(inv, lo, hi)


@dataclass
class WarmupResult:
    step_size: float
    inverse_mass_diag: np.ndarray
    state: State
    stats: list = field(default_factory=list)


def warmup(config: ChainConfig, grad_fn: GradFn, init, rng: np.random.Generator | None = None,
           chain: int | None = None, initial_metric: str = "curvature") -> WarmupResult:  # fmt: skip
    """Adapt step size and diagonal inverse metric; returns the frozen settings and final state.

    ``initial_metric`` is ``"curvature"`` (see :func:`curvature_metric`) or
    ``"unit"``; it only governs the iterations before the first slow window
    closes.

    Raises
    ------
    AdaptationFailure
        If the initial point has no finite density, or more than half the
        iterations of the final buffer diverge.
    """
    if config.n_tune < MIN_TUNE:
        raise ConfigurationError(f"n_tune must be at least {MIN_TUNE}")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    q = np.array(init, dtype=float)
    ev = _evaluate(grad_fn, q) if np.isfinite(q).all() else None
    if ev is None:
        raise AdaptationFailure("log density is not finite at the initial point", chain=chain)
    state = State(q, *ev)
    if initial_metric == "curvature":
        inv_mass = curvature_metric(grad_fn, q)
    elif initial_metric == "unit":
        inv_mass = np.ones_like(q)
    else:
        raise ConfigurationError(f"unknown initial metric {initial_metric!r}")
    step = find_reasonable_step_size(state, grad_fn, inv_mass, rng)
    da = DualAveraging(step, config.target_accept)
    ends = adaptation_windows(config.n_tune)
    slow_begin, slow_end = _init_buffer(config.n_tune), ends[-1]
    var = RunningVariance(q.size)
    stats = []
    for i in range(config.n_tune):
        state, st = nuts_draw(state, grad_fn, step, inv_mass, config.max_tree_depth, rng)
        stats.append(st)
        step = da.update(st["accept_stat"])
        if slow_begin <= i < slow_end:
            var.add(state.q)
            if i + 1 in ends:
                inv_mass = var.regularized()
                var = RunningVariance(q.size)
                step = find_reasonable_step_size(state, grad_fn, inv_mass, rng, step)
                da.restart(step)
    tail = stats[slow_end:] or stats[-1:]
    n_div = sum(s["divergent"] for s in tail)
    if n_div > 0.5 * len(tail):
        raise AdaptationFailure(f"{n_div} of {len(tail)} final warmup iterations diverged", chain=chain)
    return WarmupResult(da.final_step_size, inv_mass, state, stats)


def _init_buffer(n_tune: int) -> int:
    return 75 if 75 + 50 + 25 <= n_tune else int(0.15 * n_tune)


# --- diagnostics ---------------------------------------------------------------------


def _as_chains(draws) -> np.ndarray:
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("expected draws with shape (chains, iterations)")
    return x


def split_rhat(draws) -> float:
    """Split potential scale reduction factor of one parameter.

    Parameters
    ----------
    draws : array_like, shape (n_chains, n_iterations)
        At least 2 chains with at least 4 draws each. Each chain is cut into
        two halves (the middle draw is dropped for odd lengths) before the
        between/within variance comparison.

    Raises
    ------
    UndefinedDiagnosticError
        If the within-chain variance is zero.
    """
    x = _as_chains(draws)
    m, n = x.shape
    if m < 2 or n < 4:
        raise ValueError("split R-hat needs at least 2 chains of at least 4 draws")
    half = n // 2
    x = np.concatenate([x[:, :half], x[:, n - half :]], axis=0)
    n = half
    W = x.var(axis=1, ddof=1).mean()
    if not W > 0:
        raise UndefinedDiagnosticError("within-chain variance is zero")
    B = n * x.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * W + B / n
    return float(math.sqrt(var_plus / W))


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row, via zero-padded FFT."""
    n = x.shape[-1]
    centred = x - x.mean(axis=-1, keepdims=True)
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(centred, size, axis=-1)
    return np.fft.irfft(f * np.conjugate(f), size, axis=-1)[..., :n] / n


def effective_sample_size(draws) -> float:
    """Effective sample size from chain autocorrelations with Geyer's initial monotone sequence.

    Autocorrelations are combined across chains through the pooled variance
    estimate, so disagreement between chains lowers the result.

    Raises
    ------
    UndefinedDiagnosticError
        If the pooled variance is zero.
    """
    x = _as_chains(draws)
    m, n = x.shape
    if n < 4:
        raise ValueError("effective sample size needs at least 4 draws per chain")
    acov = _autocovariance(x)
    chain_var = acov[:, 0] * n / (n - 1.0)
    W = chain_var.mean()
    var_plus = W * (n - 1.0) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if not var_plus > 0:
        raise UndefinedDiagnosticError("draws have zero variance")
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Sum consecutive pairs while positive, forcing the pair sums to be non-increasing.
    pairs = rho[: (n // 2) * 2].reshape(-1, 2).sum(axis=1)
    total = 0.0
    prev = math.inf
    for k, s in enumerate(pairs):
        if not s > 0:
            break
        s = min(s, prev)
        total += s
        prev = s
    tau = -1.0 + 2.0 * total
    tau = max(tau, 1.0 / math.log10(m * n)) if m * n > 10 else max(tau, 1e-3)
    return float(m * n / tau)


# --- posterior draws and multi-chain runs ----------------------------------------------

STAT_FIELDS = ("step_size", "tree_depth", "n_leapfrog", "accept_stat", "divergent", "logp", "energy")


@dataclass
class PosteriorDraws:
    """Post-warmup draws in the unconstrained parameter space.

    Attributes
    ----------
    draws : ndarray, shape (n_chains, n_draws, n_params)
    names : tuple of str
        Parameter names, one per last-axis entry of ``draws``.
    stats : dict of ndarray
        Per-iteration sampler statistics, each of shape (n_chains, n_draws).
    step_size, inverse_mass_diag : ndarray
        Adapted settings per chain.
    """

    draws: np.ndarray
    names: tuple
    stats: dict
    step_size: np.ndarray
    inverse_mass_diag: np.ndarray

    def __post_init__(self):
        self.draws = np.asarray(self.draws, dtype=float)
        self.names = tuple(self.names)
        if self.draws.ndim != 3 or self.draws.shape[2] != len(self.names):
            raise ValueError("draws must have shape (chains, iterations, len(names))")
        for k, v in self.stats.items():
            if np.shape(v) != self.draws.shape[:2]:
                raise ValueError(f"stat {k!r} does not match the draw dimensions")

    @property
    def n_chains(self) -> int:
        return self.draws.shape[0]

    @property
    def n_draws(self) -> int:
        return self.draws.shape[1]

    def param(self, name: str) -> np.ndarray:
        return self.draws[:, :, self.names.index(name)]

    def flat(self) -> np.ndarray:
        """Draws pooled over chains, shape (n_chains * n_draws, n_params)."""
        return self.draws.reshape(-1, self.draws.shape[2])

    def diagnostics(self, names=None) -> dict:
        names = self.names if names is None else names
        per = {}
        for name in names:
            col = self.param(name)
            entry = {}
            for key, fn in (("rhat", split_rhat), ("ess", effective_sample_size)):
                try:
                    entry[key] = fn(col)
                except (UndefinedDiagnosticError, ValueError):
                    entry[key] = None
            per[name] = entry
        rhats = {k: v["rhat"] for k, v in per.items() if v["rhat"] is not None}
        div = np.asarray(self.stats["divergent"], dtype=bool)
        depth = np.asarray(self.stats["tree_depth"])
        return {
            "n_chains": self.n_chains,
            "n_draws": self.n_draws,
            "rhat_threshold": RHAT_THRESHOLD,
            "rhat_strict_threshold": RHAT_STRICT,
            "max_rhat": max(rhats.values()) if rhats else None,
            "min_ess": min((v["ess"] for v in per.values() if v["ess"] is not None), default=None),
            "flagged": sorted(k for k, r in rhats.items() if r >= RHAT_THRESHOLD),
            "flagged_strict": sorted(k for k, r in rhats.items() if r >= RHAT_STRICT),
            "undefined": sorted(k for k, v in per.items() if v["rhat"] is None),
            "converged": bool(rhats) and max(rhats.values()) < RHAT_THRESHOLD,
            "divergences": int(div.sum()),
            "divergences_per_chain": div.sum(axis=1).astype(int).tolist(),
            "mean_tree_depth": float(depth.mean()),
            "step_size": self.step_size.tolist(),
            "parameters": per,
        }

    def write(self, out_dir, diagnostics: dict | None = None) -> dict:
        """Write ``draws.csv``, ``sampler_stats.csv`` and ``diagnostics.json``; returns the paths."""
        import json

        import pandas as pd

        out = os.fspath(out_dir)
        os.makedirs(out, exist_ok=True)
        C, N, P = self.draws.shape
        long = pd.DataFrame(
            {
                "chain": np.repeat(np.arange(C), N * P),
                "iter": np.tile(np.repeat(np.arange(N), P), C),
                "param": np.tile(np.array(self.names, dtype=object), C * N),
                "value": self.draws.ravel(),
            }
        )
        paths = {
            "draws": os.path.join(out, "draws.csv"),
            "sampler_stats": os.path.join(out, "sampler_stats.csv"),
            "diagnostics": os.path.join(out, "diagnostics.json"),
        }
        long.to_csv(paths["draws"], index=False)
        stats = {"chain": np.repeat(np.arange(C), N), "iter": np.tile(np.arange(N), C)}
        stats.update({k: np.asarray(self.stats[k]).ravel() for k in STAT_FIELDS if k in self.stats})
        pd.DataFrame(stats).to_csv(paths["sampler_stats"], index=False)
        diagnostics = self.diagnostics() if diagnostics is None else diagnostics
        with open(paths["diagnostics"], "w", encoding="utf-8") as fh:
            json.dump(diagnostics, fh, indent=2)
            fh.write("\n")
        return paths

    @classmethod
    def read(cls, out_dir) -> "PosteriorDraws":
        import pandas as pd

        out = os.fspath(out_dir)
        long = pd.read_csv(os.path.join(out, "draws.csv"), float_precision="round_trip")
        C = int(long["chain"].max()) + 1
        N = int(long["iter"].max()) + 1
        names = tuple(long["param"].iloc[: len(long) // (C * N)])
        draws = long["value"].to_numpy().reshape(C, N, len(names))
        st = pd.read_csv(os.path.join(out, "sampler_stats.csv"), float_precision="round_trip")
        stats = {k: st[k].to_numpy().reshape(C, N) for k in STAT_FIELDS if k in st}
        step = stats["step_size"][:, 0] if "step_size" in stats else np.full(C, np.nan)
        return cls(draws, names, stats, step, np.full((C, len(names)), np.nan))


def run_chain(config: ChainConfig, grad_fn: GradFn, init, seed, chain: int = 0) -> dict:
    """Warm up and sample one chain; ``seed`` is anything accepted by ``default_rng``."""
    rng = np.random.default_rng(seed)
    w = warmup(config, grad_fn, init, rng, chain=chain)
    state = w.state
    draws = np.empty((config.n_draws, state.q.size))
    stats = {k: [] for k in STAT_FIELDS}
    for i in range(config.n_draws):
        state, st = nuts_draw(state, grad_fn, w.step_size, w.inverse_mass_diag, config.max_tree_depth, rng)
        draws[i] = state.q
        for k in STAT_FIELDS:
            stats[k].append(st[k])
    log.info("chain %d done: step size %.3g, %d divergences", chain, w.step_size, sum(stats["divergent"]))
    return {
        "draws": draws,
        "stats": {k: np.asarray(v) for k, v in stats.items()},
        "step_size": w.step_size,
        "inverse_mass_diag": w.inverse_mass_diag,
    }


def chain_seeds(seed: int, n_chains: int) -> list[np.random.SeedSequence]:
    """One independent stream per chain, spawned from ``seed``.

    :func:`run` splits each stream in two: the first child draws the initial
    point and the second drives the transitions.
    """
    return np.random.SeedSequence(seed).spawn(n_chains)


def initial_point(space, rng: np.random.Generator, jitter: float = 0.1) -> np.ndarray:
    """A prior draw restricted to the central 90% of each marginal, jittered in unconstrained space."""
    from .model import GLOBALS, GlobalHypers

    u = rng.uniform(0.05, 0.95, size=len(GLOBALS))
    hypers = GlobalHypers(**{g.name: float(g.prior.scipy().ppf(ui)) for g, ui in zip(GLOBALS, u)})
    offsets = np.clip(rng.standard_normal((space.n_districts, space.n_offsets)), -1.645, 1.645)
    x = space.to_unconstrained(hypers, offsets)
    return x + rng.uniform(-jitter, jitter, size=x.size)


def worker_count(n_chains: int) -> int:
    env = os.environ.get("MOBIDECOMP_THREADS")
    try:
        cap = int(env) if env else (os.cpu_count() or 1)
    except ValueError as exc:
        raise ConfigurationError(f"MOBIDECOMP_THREADS must be an integer, got {env!r}") from exc
    return max(1, min(n_chains, cap))


def _model_chain(args):
    config, panel, likelihood_scale, init, seed, chain = args
    from .model import PosteriorModel

    model = PosteriorModel(panel, likelihood_scale=likelihood_scale)
    return run_chain(config, model.logp_and_grad, init, seed, chain)


def run(config: ChainConfig, panel, init=None, likelihood_scale: float = 1.0,
        workers: int | None = None) -> tuple[PosteriorDraws, dict]:  # fmt: skip
    """Sample the posterior of ``panel`` with ``config.n_chains`` independent chains.

    Chain ``k`` uses the ``k``-th stream spawned from ``config.seed`` both for
    its initial point (unless ``init`` is given, as one vector or one per
    chain) and for its transitions, so results do not depend on ``workers``.

    Returns
    -------
    (PosteriorDraws, dict)
        The draws and the diagnostics report.
    """
    from .model import ParameterSpace

    space = ParameterSpace(panel.ags)
    seeds = chain_seeds(config.seed, config.n_chains)
    inits = []
    for k, ss in enumerate(seeds):
        init_ss, run_ss = ss.spawn(2)
        if init is None:
            inits.append(initial_point(space, np.random.default_rng(init_ss)))
        else:
            arr = np.asarray(init, dtype=float)
            inits.append(arr[k] if arr.ndim == 2 else arr)
        seeds[k] = run_ss
    jobs = [(config, panel, likelihood_scale, inits[k], seeds[k], k) for k in range(config.n_chains)]
    workers = worker_count(config.n_chains) if workers is None else max(1, int(workers))
    if workers == 1:
        results = [_model_chain(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_model_chain, jobs))
    draws = PosteriorDraws(
        draws=np.stack([r["draws"] for r in results]),
        names=space.names,
        stats={k: np.stack([r["stats"][k] for r in results]) for k in STAT_FIELDS},
        step_size=np.array([r["step_size"] for r in results]),
        inverse_mass_diag=np.stack([r["inverse_mass_diag"] for r in results]),
    )
    return draws, draws.diagnostics()
