"""Bayesian decomposition of district mobility into multiplicative factors.

Submodules
----------
ingest
    Loading and validating the weekly panel and district covariates.
diff
    Reverse-mode automatic differentiation on arrays.
model
    Priors, factors, likelihood and the log-posterior with its gradient.
sampler
    No-U-Turn sampling with warmup adaptation and convergence diagnostics.
posterior
    Factor trajectories, reaction strengths and per-district summaries.
stats
    Regression, best-subset search, t-tests, peak incidence and mediation.
synth
    Synthetic panels, planted datasets and simulation-based calibration.
cli
    The ``mobidecomp`` command-line entry point.
"""

from __future__ import annotations

from .errors import MobidecompError

__version__ = "0.1.0"

__all__ = ["MobidecompError", "__version__"]
