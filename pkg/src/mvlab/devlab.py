"""Moderate-deviation machinery.

The skeleton equation is linear in (Y, hdot), so the rate function of a
target path, the minimal exit cost and the optimal tilts all reduce to
finite-dimensional linear algebra on the time grid. Within a cell
``[t_k, t_{k+1})`` the coefficients are frozen at ``t_k`` and the control is
constant, and the cell map is integrated exactly:

    Y_{k+1} = Phi_k Y_k + Gamma_k Sigma_k hdot_k,
    Phi_k = exp(A_k dt),  Gamma_k = int_0^dt exp(A_k u) du.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.special import log_ndtr

from .engine import (
    STREAM_LAW,
    STREAM_REPLICA,
    BrownianBundle,
    Path,
    TimeGrid,
    _particle_run,
    deviation_processes,
    lambda_scale,
    linearization,
    solve_limit_ode,
)
from .errors import ContractViolation
from .fluctlab import validate_ladder
from .measure import EmpiricalMeasure


@dataclass(frozen=True, eq=False)
class Control:
    """Piecewise-constant control derivative, one value per grid cell."""

    grid: TimeGrid
    hdot: np.ndarray  # (steps, dim)

    def __post_init__(self):
        h = np.asarray(self.hdot, dtype=float)
        if h.ndim == 1:
            h = h[:, None]
        if h.shape[0] != self.grid.steps:
            raise ContractViolation("control needs one value per grid cell")
        object.__setattr__(self, "hdot", h)

    @classmethod
    def zeros(cls, grid, dim=1):
        return cls(grid, np.zeros((grid.steps, dim)))

    @classmethod
    def constant(cls, grid, value):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.tile(value, (grid.steps, 1)))

    @property
    def energy(self) -> float:
        return 0.5 * self.grid.dt * float(np.sum(self.hdot**2))

    def path(self) -> np.ndarray:
        """h(t_k) with h(0) = 0."""
        d = self.hdot.shape[1]
        return np.vstack([np.zeros((1, d)), np.cumsum(self.hdot, axis=0) * self.grid.dt])

    def scaled(self, factor) -> "Control":
        return Control(self.grid, factor * self.hdot)


@dataclass(frozen=True, eq=False)
class Skeleton:
    grid: TimeGrid
    A: np.ndarray
    S: np.ndarray
    Phi: np.ndarray
    B: np.ndarray  # Gamma_k Sigma_k

    @classmethod
    def from_model(cls, model, limit_path: Path) -> "Skeleton":
        A, _, S = linearization(model, limit_path)
        grid = limit_path.grid
        n, d = grid.steps, model.dim
        aug = np.zeros((n, 2 * d, 2 * d))
        aug[:, :d, :d] = A[:n] * grid.dt
        aug[:, :d, d:] = np.eye(d) * grid.dt
        E = expm(aug)
        return cls(grid, A, S, E[:, :d, :d], E[:, :d, d:] @ S[:n])

    @property
    def dim(self):
        return self.A.shape[1]

    def propagate(self, hdot: np.ndarray) -> np.ndarray:
        n, d = self.grid.steps, self.dim
        Y = np.zeros((n + 1, d))
        for k in range(n):
            Y[k + 1] = self.Phi[k] @ Y[k] + self.B[k] @ hdot[k]
        return Y


def _skeleton_for(model, limit_path, system):
    if system is not None:
        if system.grid != limit_path.grid:
            raise ContractViolation("skeleton system built on a different grid")
        return system
    return Skeleton.from_model(model, limit_path)


def solve_skeleton(model, limit_path: Path, control: Control, system: Skeleton | None = None) -> Path:
    if control.grid != limit_path.grid:
        raise ContractViolation("control and limit path live on different grids")
    if control.hdot.shape[1] != model.dim:
        raise ContractViolation("control dimension does not match the model")
    sk = _skeleton_for(model, limit_path, system)
    return Path(sk.grid, sk.propagate(control.hdot), "skeleton")


@dataclass
class RateFunctionResult:
    value: float  # math.inf when unattainable
    optimal_control: Control | None
    residual: float
    tolerance: float

    @property
    def attainable(self) -> bool:
        return np.isfinite(self.value)


def rate_function(model, limit_path: Path, target, tolerance: float | None = None,
                  system: Skeleton | None = None) -> RateFunctionResult:
    """Minimal control energy steering the skeleton through ``target``.

    Each cell is an independent least-squares problem for ``hdot_k``; the
    pseudo-inverse picks the least-norm solution, and a path that cannot be
    followed (residual above tolerance) gets the value +inf.
    """
    sk = _skeleton_for(model, limit_path, system)
    g = np.asarray(target.values if isinstance(target, Path) else target, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    if g.shape != (sk.grid.steps + 1, sk.dim):
        raise ContractViolation(f"target has shape {g.shape}, expected {(sk.grid.steps + 1, sk.dim)}")
    if np.any(g[0] != 0.0):
        raise ContractViolation("target must start at 0")
    tol = 1e-6 * (1.0 + float(np.max(np.abs(g)))) if tolerance is None else float(tolerance)
    rhs = g[1:] - np.einsum("kij,kj->ki", sk.Phi, g[:-1])
    hdot = np.einsum("kij,kj->ki", np.linalg.pinv(sk.B), rhs)
    control = Control(sk.grid, hdot)
    residual = float(np.max(np.abs(sk.propagate(hdot) - g)))
    if residual > tol:
        return RateFunctionResult(np.inf, None, residual, tol)
    return RateFunctionResult(control.energy, control, residual, tol)


@dataclass
class ExitRateResult:
    value: float
    optimal_time: float | None
    optimal_index: int | None
    optimal_control: Control | None
    costs: np.ndarray = field(repr=False)
    flags: list = field(default_factory=list)


def exit_rate(model, limit_path: Path, radius: float, side: str = "two_sided",
              system: Skeleton | None = None) -> ExitRateResult:
    """Infimum of the rate function over paths leaving the ball of ``radius``
    (or crossing ``radius`` in the first coordinate, ``side="one_sided"``)
    before the horizon.

    For every exit index the inner problem is the minimum-energy transfer
    0 -> boundary point, ``1/2 y^T W^-1 y`` with W the discrete
    controllability Gramian; the boundary point is optimised in closed form.
    """
    if not radius > 0:
        raise ContractViolation("radius must be positive")
    if side not in ("one_sided", "two_sided"):
        raise ContractViolation(f"unknown side {side!r}")
    sk = _skeleton_for(model, limit_path, system)
    n, d, dt = sk.grid.steps, sk.dim, sk.grid.dt
    costs = np.full(n + 1, np.inf)
    targets = np.zeros((n + 1, d))
    W = np.zeros((d, d))
    for k in range(n):
        W = sk.Phi[k] @ W @ sk.Phi[k].T + sk.B[k] @ sk.B[k].T / dt
        W = 0.5 * (W + W.T)
        if side == "one_sided":
            if W[0, 0] > 0:
                costs[k + 1] = radius**2 / (2.0 * W[0, 0])
                targets[k + 1] = radius * W[:, 0] / W[0, 0]
        else:
            vals, vecs = np.linalg.eigh(W)
            if vals[-1] > 0:
                v = vecs[:, -1] * (1.0 if vecs[0, -1] >= 0 else -1.0)
                costs[k + 1] = radius**2 / (2.0 * vals[-1])
                targets[k + 1] = radius * v
    if not np.any(np.isfinite(costs)):
        return ExitRateResult(np.inf, None, None, None, costs, ["not_controllable"])
    tau = int(np.argmin(costs))
    # rebuild the Gramian at tau to recover the multiplier
    W = np.zeros((d, d))
    for k in range(tau):
        W = sk.Phi[k] @ W @ sk.Phi[k].T + sk.B[k] @ sk.B[k].T / dt
    nu = np.linalg.pinv(W) @ targets[tau]
    hdot = np.zeros((n, d))
    P = np.eye(d)
    for k in range(tau - 1, -1, -1):
        hdot[k] = sk.B[k].T @ P.T @ nu / dt
        P = P @ sk.Phi[k]
    return ExitRateResult(float(costs[tau]), tau * dt, tau, Control(sk.grid, hdot), costs)


# ---------------------------------------------------------------------------
# importance sampling


@dataclass(frozen=True)
class SupEvent:
    threshold: float
    side: str = "one_sided"

    def __post_init__(self):
        if self.threshold < 0:
            raise ContractViolation("threshold must be nonnegative")
        if self.side not in ("one_sided", "two_sided"):
            raise ContractViolation(f"unknown side {self.side!r}")

    @classmethod
    def from_dict(cls, spec):
        kind = spec.get("kind", "sup_exceeds")
        if kind != "sup_exceeds":
            raise ContractViolation(f"unsupported event kind {kind!r}")
        return cls(float(spec["threshold"]), spec.get("side", "one_sided"))


def _crossing_probability(paths, event, diff_var, dt):
    """Conditional probability that the continuous path crosses the threshold,
    given its values on the grid (Brownian-bridge interpolation, d = 1).

    ``paths``: (M, n+1), ``diff_var``: (M, n) local variance rate per cell.
    """
    delta = event.threshold
    x0, x1 = paths[:, :-1], paths[:, 1:]
    var = np.maximum(diff_var * dt, 1e-300)

    def log_survival(dist0, dist1):
        inside = (dist0 > 0) & (dist1 > 0)
        p = np.where(inside, np.exp(-2.0 * np.where(inside, dist0 * dist1, 0.0) / var), 1.0)
        return np.sum(np.log1p(-np.minimum(p, 1.0 - 1e-16)), axis=1) + np.where(np.all(inside, axis=1), 0.0, -np.inf)

    ls = log_survival(delta - x0, delta - x1)
    if event.side == "two_sided":
        ls = ls + log_survival(delta + x0, delta + x1)
    return -np.expm1(ls)


def _hit_indicator(paths, event):
    if event.side == "one_sided":
        sup = np.max(paths[:, :, 0], axis=1)
    else:
        sup = np.max(np.linalg.norm(paths, axis=2), axis=1)
    return (sup >= event.threshold).astype(float)


@dataclass
class ISResult:
    probability: float
    standard_error: float
    relative_error: float
    mean_weight: float
    weight_standard_error: float
    excluded: int
    replicas: int
    hits: int


def girsanov_is_estimate(model, x0, epsilon, lam, event: SupEvent, shift: Control | None, grid: TimeGrid,
                         noise: BrownianBundle, law_noise: BrownianBundle | None = None, particles=1024,
                         monitoring="bridge", reference="euler", workers=1) -> ISResult:
    """Importance-sampling estimate of P(sup_t Xbar_t crosses the threshold).

    The replicas' driver becomes ``W + lam * int hdot``, which adds
    ``sigma hdot dt`` to the deviation process, and each replica is weighted
    by the exact discrete likelihood ratio
    ``exp(-lam sum_k <hdot_k, dW_k> - lam^2 dt/2 sum_k |hdot_k|^2)``.
    The law is always estimated from an unshifted particle cloud.
    """
    if not epsilon > 0 or not lam > 0:
        raise ContractViolation("epsilon and lambda must be positive")
    if monitoring not in ("grid", "bridge"):
        raise ContractViolation(f"unknown monitoring {monitoring!r}")
    if law_noise is None:
        law_noise = BrownianBundle.generate(noise.seed, particles, grid, model.dim, STREAM_LAW, workers)
    hdot = np.zeros((grid.steps, model.dim)) if shift is None else shift.hdot
    if shift is not None and shift.grid != grid:
        raise ContractViolation("shift control lives on a different grid")
    law, X = _particle_run(model, x0, epsilon, grid, law_noise, noise, lam * hdot * grid.dt)
    limit = solve_limit_ode(model, x0, grid, method=reference)
    xbar = (X - limit.values[None]) / (np.sqrt(epsilon) * lam)

    log_w = -lam * np.einsum("mkd,kd->m", noise.increments, hdot) - 0.5 * lam**2 * grid.dt * np.sum(hdot**2)
    weights = np.exp(log_w)
    ok = np.isfinite(weights)

    if monitoring == "bridge" and model.dim == 1:
        var = np.empty((X.shape[0], grid.steps))
        for k in range(grid.steps):
            mu = EmpiricalMeasure(law[:, k])
            var[:, k] = model.diffusion(k * grid.dt, X[:, k], mu)[:, 0, 0] ** 2
        hit = _crossing_probability(xbar[:, :, 0], event, var / lam**2, grid.dt)
    else:
        hit = _hit_indicator(xbar, event)

    f = (hit * weights)[ok]
    w = weights[ok]
    m = f.size
    prob = float(f.mean()) if m else float("nan")
    se = float(f.std(ddof=1) / np.sqrt(m)) if m > 1 else float("nan")
    return ISResult(
        probability=prob,
        standard_error=se,
        relative_error=se / prob if prob > 0 else float("inf"),
        mean_weight=float(w.mean()) if m else float("nan"),
        weight_standard_error=float(w.std(ddof=1) / np.sqrt(m)) if m > 1 else float("nan"),
        excluded=int((~ok).sum()),
        replicas=int(weights.size),
        hits=int(np.count_nonzero(hit[ok] > 0)),
    )


def gaussian_sup_probability(x, side="one_sided"):
    """Reflection-principle tail 2 Phi(-x) for sup of a standard BM on [0, 1]
    (one-sided), returned on the log scale."""
    lp = np.log(2.0) + log_ndtr(-x)
    if side == "two_sided":
        # leading term of the two-barrier series; exact up to O(Phi(-3x))
        lp = np.log(2.0) + lp
    return float(lp)


@dataclass
class MdpRow:
    epsilon: float
    lam: float
    probability: float
    standard_error: float
    normalized_log_prob: float | None
    band: tuple | None
    predicted: float
    lower_bound_only: bool


def mdp_decay_experiment(model, x0, alpha, epsilon_ladder, event: SupEvent, grid: TimeGrid, seed,
                         replicas=4096, particles=1024, monitoring="bridge", reference="euler",
                         workers=1) -> list[MdpRow]:
    """lambda^-2 log P(event) along an epsilon ladder, estimated with the
    optimal exit tilt, next to the predicted limit -inf_{exit} I."""
    eps = validate_ladder(epsilon_ladder)
    lams = [lambda_scale(e, alpha) for e in eps]
    limit = solve_limit_ode(model, x0, grid, method=reference)
    if event.threshold == 0:
        predicted, shift = 0.0, None
    else:
        ex = exit_rate(model, limit, event.threshold, event.side)
        predicted, shift = -ex.value, ex.optimal_control
    noise = BrownianBundle.generate(seed, replicas, grid, model.dim, STREAM_REPLICA, workers)
    law = BrownianBundle.generate(seed, particles, grid, model.dim, STREAM_LAW, workers)
    rows = []
    for e, lam in zip(eps, lams):
        r = girsanov_is_estimate(model, x0, e, lam, event, shift, grid, noise, law,
                                 monitoring=monitoring, reference=reference)
        if r.probability > 0:
            norm = float(np.log(r.probability) / lam**2)
            # delta method: sd(log P) ~ se / P
            half = r.standard_error / (r.probability * lam**2)
            band = (norm - half, norm + half)
            rows.append(MdpRow(float(e), lam, r.probability, r.standard_error, norm, band, predicted, False))
        else:
            rows.append(MdpRow(float(e), lam, 0.0, r.standard_error, None, None, predicted, True))
    return rows


@dataclass
class EquivalenceRow:
    epsilon: float
    lam: float
    probability: float
    normalized_log_prob: float  # lambda^-2 log P, -inf when P = 0
    eps_log_prob: float  # eps log P, -inf when P = 0
    mean_gap: float


def exponential_equivalence_check(model, x0, alpha, epsilon_ladder, delta, grid: TimeGrid, seed,
                                  replicas=4096, particles=1024, reference="euler",
                                  workers=1) -> list[EquivalenceRow]:
    """Tail probability of the coupling gap sup_t |Xbar - Ybar| >= delta."""
    if not delta > 0:
        raise ContractViolation("delta must be positive")
    eps = validate_ladder(epsilon_ladder)
    noise = BrownianBundle.generate(seed, replicas, grid, model.dim, STREAM_REPLICA, workers)
    law = BrownianBundle.generate(seed, particles, grid, model.dim, STREAM_LAW, workers)
    rows = []
    for e in eps:
        lam = lambda_scale(e, alpha)
        dev = deviation_processes(model, x0, e, lam, grid, noise, law, reference)
        gap = np.max(np.linalg.norm(dev["xbar"].values - dev["ybar"].values, axis=2), axis=1)
        p = float(np.mean(gap >= delta))
        logp = np.log(p) if p > 0 else -np.inf
        rows.append(EquivalenceRow(float(e), lam, p, float(logp / lam**2), float(e * logp), float(gap.mean())))
    return rows
