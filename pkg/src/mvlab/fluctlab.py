"""Coupled CLT experiments: how fast (X^eps - X^0)/sqrt(eps) approaches Z."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import (
    STREAM_LAW,
    STREAM_REPLICA,
    BrownianBundle,
    TimeGrid,
    _particle_run,
    simulate_fluctuation,
    solve_limit_ode,
)
from .errors import ContractViolation


@dataclass
class CltError:
    estimate: float
    standard_error: float | None
    samples: np.ndarray = field(repr=False)
    flags: list = field(default_factory=list)


def clt_error(model, x0, epsilon, p, grid, noise, law_noise=None, mean_mode="analytic",
              reference="euler", limit=None, fluctuation=None) -> CltError:
    """Monte Carlo estimate of E sup_k |Z^eps_{t_k} - Z_{t_k}|^p.

    ``Z^eps`` and ``Z`` share the increments in ``noise``. With ``law_noise``
    the replicas feel the empirical law of a separate particle cloud,
    otherwise they interact among themselves.
    """
    if p < 2:
        raise ContractViolation("moment order p must be at least 2")
    if not epsilon > 0:
        raise ContractViolation("epsilon must be positive")
    if limit is None:
        limit = solve_limit_ode(model, x0, grid, method=reference)
    if fluctuation is None:
        fluctuation = simulate_fluctuation(model, limit, grid, noise, mean_mode)
    if law_noise is None:
        X, _ = _particle_run(model, x0, epsilon, grid, noise)
    else:
        _, X = _particle_run(model, x0, epsilon, grid, law_noise, noise)
    root = np.sqrt(epsilon)
    z_eps = (X - limit.values[None]) / root
    diff = np.max(np.linalg.norm(z_eps - fluctuation.values, axis=2), axis=1)
    # gaps no larger than the accumulated rounding of both recursions are exact zeros
    ulp = np.finfo(float).eps * 8 * (grid.steps + 1)
    scale = (np.max(np.abs(X), axis=(1, 2)) + np.max(np.abs(limit.values))) / root
    floor = ulp * (scale + np.max(np.abs(fluctuation.values), axis=(1, 2)))
    diff = np.where(diff <= floor, 0.0, diff)
    samples = diff**p
    flags = []
    if np.all(samples == 0):
        flags.append("exact_coupling")
    if samples.size > 1:
        se = float(samples.std(ddof=1) / np.sqrt(samples.size))
    else:
        se = None
        flags.append("standard_error_unavailable")
    return CltError(float(samples.mean()), se, samples, flags)


@dataclass
class CltExperimentResult:
    epsilon_ladder: np.ndarray
    p: float
    errors: np.ndarray
    standard_errors: np.ndarray
    fitted_slope: float | None
    slope_ci: tuple | None
    theory_slope: float
    excluded: list = field(default_factory=list)
    flags: list = field(default_factory=list)
    n_doubling_ratio: float | None = None


def _ols_slope(x, y):
    x = x - x.mean()
    return float(np.dot(x, y - y.mean()) / np.dot(x, x))


def validate_ladder(ladder, minimum=1):
    eps = np.asarray(ladder, dtype=float)
    if eps.ndim != 1 or eps.size < minimum:
        raise ContractViolation(f"epsilon ladder needs at least {minimum} points")
    if np.any(eps <= 0) or np.any(np.diff(eps) >= 0):
        raise ContractViolation("epsilon ladder must be strictly decreasing and positive")
    return eps


def clt_rate_fit(model, x0, epsilon_ladder, p, grid: TimeGrid, seed, replicas=4096, particles=1024,
                 mean_mode="analytic", reference="euler", bootstrap=400, stability_check=False,
                 workers=1) -> CltExperimentResult:
    """Fit the log-log slope of the coupled CLT error against epsilon.

    Every ladder point reuses the same Brownian increments, so the fit sees
    common random numbers. The slope CI is a percentile bootstrap over
    replicas. ``particles=None`` lets the replicas interact among themselves
    instead of feeling a separate law cloud.
    """
    eps = validate_ladder(epsilon_ladder, minimum=3)
    noise = BrownianBundle.generate(seed, replicas, grid, model.dim, STREAM_REPLICA, workers)
    law = None if particles is None else BrownianBundle.generate(seed, particles, grid, model.dim, STREAM_LAW, workers)
    limit = solve_limit_ode(model, x0, grid, method=reference)
    fluct = simulate_fluctuation(model, limit, grid, noise, mean_mode)

    runs = [clt_error(model, x0, e, p, grid, noise, law, mean_mode, reference, limit, fluct) for e in eps]
    errors = np.array([r.estimate for r in runs])
    ses = np.array([np.nan if r.standard_error is None else r.standard_error for r in runs])
    samples = np.stack([r.samples for r in runs])

    keep = errors > 0
    excluded = [float(e) for e in eps[~keep]]
    flags = []
    slope, ci = None, None
    if keep.sum() < 2:
        flags.append("regression_skipped: fewer than two nonzero errors (exact coupling)")
    else:
        logx = np.log(eps[keep])
        slope = _ols_slope(logx, np.log(errors[keep]))
        rng = np.random.default_rng([int(seed), 0xB007])
        boot = []
        for _ in range(bootstrap):
            idx = rng.integers(0, replicas, size=replicas)
            est = samples[keep][:, idx].mean(axis=1)
            if np.all(est > 0):
                boot.append(_ols_slope(logx, np.log(est)))
        if boot:
            ci = (float(np.percentile(boot, 2.5)), float(np.percentile(boot, 97.5)))

    ratio = None
    if stability_check and particles is not None:
        law2 = BrownianBundle.generate(seed, 2 * particles, grid, model.dim, STREAM_LAW, workers)
        e_big = clt_error(model, x0, eps[0], p, grid, noise, law2, mean_mode, reference, limit, fluct).estimate
        ratio = e_big / errors[0] if errors[0] > 0 else None
    return CltExperimentResult(eps, p, errors, ses, slope, ci, p / 2.0, excluded, flags, ratio)
