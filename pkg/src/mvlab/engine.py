"""Time grids, reproducible Brownian noise and the path solvers.

Three kinds of trajectories are produced here, all driven by the same
:class:`BrownianBundle` so that they stay pathwise coupled:

* the interacting particle system for the small-noise equation, where the law
  is replaced by the empirical measure of ``N`` particles;
* the deterministic limit path (``epsilon = 0``, measure = Dirac at the state);
* the linear fluctuation process driven along the limit path.
"""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .errors import ContractViolation, IntegrationFailure
from .measure import EmpiricalMeasure, dirac

STREAM_REPLICA = 0
STREAM_LAW = 1


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if not self.horizon > 0:
            raise ContractViolation("horizon must be positive")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ContractViolation("steps must be a positive integer")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def time(self, k: int) -> float:
        return k * self.dt


def _replica_normals(seed: int, stream: int, replica: int, count: int) -> np.ndarray:
    # Philox keyed by (seed, stream, replica); draw k sits at counter position k,
    # so a value never depends on how many other draws were consumed.
    key = np.random.SeedSequence([seed, stream, replica]).generate_state(2, np.uint64)
    raw = np.random.Philox(key=key).random_raw(count)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


@dataclass(frozen=True, eq=False)
class BrownianBundle:
    """Brownian increments, shape (replicas, steps, dim), each N(0, dt I)."""

    seed: int
    grid: TimeGrid
    increments: np.ndarray
    stream: int = STREAM_REPLICA

    @classmethod
    def generate(cls, seed, replicas, grid, dim=1, stream=STREAM_REPLICA, workers=1, first_replica=0):
        if seed is None or int(seed) < 0:
            raise ContractViolation("seed must be a nonnegative integer")
        if replicas < 1 or dim < 1:
            raise ContractViolation("replicas and dim must be positive")
        seed = int(seed)
        count = grid.steps * dim
        out = np.empty((replicas, grid.steps, dim))
        scale = np.sqrt(grid.dt)

        def fill(rows):
            for j in rows:
                out[j] = _replica_normals(seed, stream, first_replica + j, count).reshape(grid.steps, dim) * scale

        chunks = [c for c in np.array_split(np.arange(replicas), max(1, int(workers))) if c.size]
        if len(chunks) == 1:
            fill(chunks[0])
        else:
            with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
                list(pool.map(fill, chunks))
        return cls(seed, grid, out, stream)

    @property
    def replicas(self) -> int:
        return self.increments.shape[0]

    @property
    def dim(self) -> int:
        return self.increments.shape[2]

    def subset(self, rows) -> "BrownianBundle":
        return BrownianBundle(self.seed, self.grid, self.increments[np.asarray(rows)], self.stream)

    def coarsen(self, factor: int) -> "BrownianBundle":
        """Sum consecutive increments, giving the same paths on a coarser grid."""
        if self.grid.steps % factor:
            raise ContractViolation("coarsening factor must divide the step count")
        m, n, d = self.increments.shape
        inc = self.increments.reshape(m, n // factor, factor, d).sum(axis=2)
        return BrownianBundle(self.seed, TimeGrid(self.grid.horizon, n // factor), inc, self.stream)

    def paths(self) -> np.ndarray:
        m, n, d = self.increments.shape
        return np.concatenate([np.zeros((m, 1, d)), np.cumsum(self.increments, axis=1)], axis=1)


@dataclass(frozen=True, eq=False)
class Path:
    grid: TimeGrid
    values: np.ndarray  # (steps + 1, dim)
    label: str = "limit"


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    grid: TimeGrid
    values: np.ndarray  # (replicas, steps + 1, dim)
    label: str

    @property
    def replicas(self) -> int:
        return self.values.shape[0]

    def terminal(self) -> np.ndarray:
        return self.values[:, -1, :]

    def write_csv(self, fh, provenance: dict | None = None):
        """Replica-major rows ``replica, step, time, component_0, ...``."""
        if provenance is not None:
            fh.write("# " + json.dumps(provenance, sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        m, n1, d = self.values.shape
        w.writerow(["replica", "step", "time"] + [f"component_{i}" for i in range(d)])
        times = self.grid.nodes
        for j in range(m):
            for k in range(n1):
                w.writerow([j, k, repr(float(times[k]))] + [repr(float(v)) for v in self.values[j, k]])

    def to_csv_string(self, provenance=None) -> str:
        buf = io.StringIO()
        self.write_csv(buf, provenance)
        return buf.getvalue()


def lambda_scale(epsilon: float, alpha: float) -> float:
    """Deviation scale lambda(eps) = eps^-alpha with alpha in (0, 1/2)."""
    if not 0.0 < alpha < 0.5:
        raise ContractViolation(f"alpha={alpha} violates 0 < alpha < 1/2 (needs lambda -> inf and sqrt(eps) lambda -> 0)")
    if not epsilon > 0:
        raise ContractViolation("epsilon must be positive")
    return float(epsilon) ** (-alpha)


def _as_state(x0, dim):
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (dim,):
        raise ContractViolation(f"initial state has shape {x0.shape}, expected ({dim},)")
    return x0


def _apply(sig, dw):
    # sig: (..., d, d), dw: (..., d)
    if sig.shape[-1] == 1:
        return sig[..., 0] * dw
    return np.einsum("...ij,...j->...i", sig, dw)


def _check_finite(arr, k, what):
    if not np.all(np.isfinite(arr)):
        raise IntegrationFailure(f"non-finite {what} state", step=k)


def solve_limit_ode(model, x0, grid: TimeGrid, method: str = "rk4") -> Path:
    """Integrate dX = b_t(X, delta_X) dt from ``x0``.

    ``method="rk4"`` is the classical fourth-order scheme; ``"euler"`` gives the
    epsilon = 0 limit of the particle recursion, which is what coupled
    experiments subtract so that time-discretisation bias cancels.
    """
    x = _as_state(x0, model.dim)
    b = model.drift
    dt = grid.dt
    out = np.empty((grid.steps + 1, model.dim))
    out[0] = x
    for k in range(grid.steps):
        t = k * dt
        if method == "rk4":
            k1 = b(t, x, dirac(x))
            s = x + 0.5 * dt * k1
            k2 = b(t + 0.5 * dt, s, dirac(s))
            s = x + 0.5 * dt * k2
            k3 = b(t + 0.5 * dt, s, dirac(s))
            s = x + dt * k3
            k4 = b(t + dt, s, dirac(s))
            x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        elif method == "euler":
            x = x + dt * b(t, x, dirac(x))
        else:
            raise ContractViolation(f"unknown limit-ODE method {method!r}")
        _check_finite(x, k + 1, "limit")
        out[k + 1] = x
    return Path(grid, out, "limit")


def _check_noise(noise, grid, dim):
    if noise.grid != grid:
        raise ContractViolation("noise bundle was generated on a different grid")
    if noise.dim != dim:
        raise ContractViolation("noise dimension does not match the model")


def _particle_run(model, x0, epsilon, grid, law_noise, tagged_noise=None, tagged_shift=None, record=True):
    """Euler-Maruyama for the interacting system.

    Law particles (``law_noise``) interact through their empirical measure.
    Tagged replicas, when given, feel that measure but do not contribute to it;
    their driver may carry a deterministic shift (per-step increment, (n, d)).
    Returns (law_values, tagged_values), each (replicas, n+1, d) or the
    terminal state when ``record`` is False.
    """
    if epsilon < 0:
        raise ContractViolation("epsilon must be nonnegative")
    x0 = _as_state(x0, model.dim)
    _check_noise(law_noise, grid, model.dim)
    if tagged_noise is not None:
        _check_noise(tagged_noise, grid, model.dim)
    b, sig = model.drift, model.diffusion
    dt, root = grid.dt, np.sqrt(epsilon)
    n = grid.steps

    X = np.repeat(x0[None, :], law_noise.replicas, axis=0)
    Y = None if tagged_noise is None else np.repeat(x0[None, :], tagged_noise.replicas, axis=0)
    law_out = tag_out = None
    if record:
        law_out = np.empty((X.shape[0], n + 1, model.dim))
        law_out[:, 0] = X
        if Y is not None:
            tag_out = np.empty((Y.shape[0], n + 1, model.dim))
            tag_out[:, 0] = Y
    for k in range(n):
        t = k * dt
        mu = EmpiricalMeasure(X)
        if Y is not None:
            dW = tagged_noise.increments[:, k]
            if tagged_shift is not None:
                dW = dW + tagged_shift[k]
            Y = Y + b(t, Y, mu) * dt + root * _apply(sig(t, Y, mu), dW)
            _check_finite(Y, k + 1, "replica")
            if record:
                tag_out[:, k + 1] = Y
        X = X + b(t, X, mu) * dt + root * _apply(sig(t, X, mu), law_noise.increments[:, k])
        _check_finite(X, k + 1, "particle")
        if record:
            law_out[:, k + 1] = X
    if not record:
        return X, Y
    return law_out, tag_out


def simulate_particles(model, x0, epsilon, grid, noise: BrownianBundle) -> PathEnsemble:
    """N-particle system with N = ``noise.replicas``, all started at ``x0``."""
    values, _ = _particle_run(model, x0, epsilon, grid, noise)
    return PathEnsemble(grid, values, "solution")


def simulate_tagged(model, x0, epsilon, grid, law_noise, noise, shift=None) -> PathEnsemble:
    """Replicas driven by ``noise`` that feel the empirical law of an
    independent particle cloud driven by ``law_noise``."""
    _, values = _particle_run(model, x0, epsilon, grid, law_noise, noise, shift)
    return PathEnsemble(grid, values, "solution")


def simulate_decoupled(model, limit_path: Path, epsilon, grid, noise, shift=None) -> PathEnsemble:
    """The equation with the law frozen at the Dirac mass on the limit path."""
    if limit_path.grid != grid:
        raise ContractViolation("limit path and grid differ")
    _check_noise(noise, grid, model.dim)
    b, sig = model.drift, model.diffusion
    dt, root = grid.dt, np.sqrt(epsilon)
    Y = np.repeat(limit_path.values[:1], noise.replicas, axis=0)
    out = np.empty((noise.replicas, grid.steps + 1, model.dim))
    out[:, 0] = Y
    for k in range(grid.steps):
        t = k * dt
        mu = dirac(limit_path.values[k])
        dW = noise.increments[:, k] if shift is None else noise.increments[:, k] + shift[k]
        Y = Y + b(t, Y, mu) * dt + root * _apply(sig(t, Y, mu), dW)
        _check_finite(Y, k + 1, "decoupled")
        out[:, k + 1] = Y
    return PathEnsemble(grid, out, "decoupled")


def linearization(model, limit_path: Path):
    """Coefficients along the limit path: (grad b, D^L b at the path point, sigma),
    each of shape (steps + 1, d, d)."""
    grid = limit_path.grid
    d = model.dim
    A = np.empty((grid.steps + 1, d, d))
    L = np.empty_like(A)
    S = np.empty_like(A)
    for k, x in enumerate(limit_path.values):
        t = k * grid.dt
        mu = dirac(x)
        A[k] = np.reshape(model.grad_drift(t, x, mu), (d, d))
        S[k] = np.reshape(model.diffusion(t, x, mu), (d, d))
        L[k] = np.reshape(model.lderiv_drift(t, x, mu, x), (d, d)) if model.lderiv_drift is not None else 0.0
    return A, L, S


def simulate_fluctuation(model, limit_path: Path, grid, noise, mean_mode: str = "analytic") -> PathEnsemble:
    """Euler-Maruyama for the linear fluctuation equation along the limit path.

    The law-derivative term acts on ``m(t) = E Z_t``. With ``mean_mode="analytic"``
    ``m`` follows its own linear ODE from ``m(0) = 0`` (so it stays zero);
    ``"sample"`` uses the replica average instead.
    """
    if limit_path.grid != grid:
        raise ContractViolation("limit path was computed on a different grid")
    if mean_mode not in ("analytic", "sample"):
        raise ContractViolation(f"unknown mean_mode {mean_mode!r}")
    _check_noise(noise, grid, model.dim)
    A, L, S = linearization(model, limit_path)
    dt = grid.dt
    Z = np.zeros((noise.replicas, model.dim))
    m = np.zeros(model.dim)
    out = np.empty((noise.replicas, grid.steps + 1, model.dim))
    out[:, 0] = Z
    for k in range(grid.steps):
        if mean_mode == "sample":
            m = Z.mean(axis=0)
        drift = Z @ A[k].T + L[k] @ m
        Z = Z + drift * dt + _apply(S[k], noise.increments[:, k])
        if mean_mode == "analytic":
            m = m + dt * (A[k] + L[k]) @ m
        _check_finite(Z, k + 1, "fluctuation")
        out[:, k + 1] = Z
    return PathEnsemble(grid, out, "fluctuation")


def deviation_processes(model, x0, epsilon, lam, grid, noise, law_noise=None, reference="euler", shift=None):
    """Coupled deviation processes (X^eps - X^0) / (sqrt(eps) lam) and the same
    for the decoupled equation, both driven by ``noise``.

    Without ``law_noise`` the replicas are themselves the interacting
    particles. ``shift`` adds a deterministic per-step increment to the driver
    of the replicas (never to the law particles).
    Returns a dict with ``xbar``, ``ybar`` and ``limit``.
    """
    if not epsilon > 0 or not lam > 0:
        raise ContractViolation("epsilon and lambda must be positive")
    limit = solve_limit_ode(model, x0, grid, method=reference)
    if law_noise is None:
        if shift is not None:
            raise ContractViolation("a driver shift needs separate law particles")
        X, _ = _particle_run(model, x0, epsilon, grid, noise)
    else:
        _, X = _particle_run(model, x0, epsilon, grid, law_noise, noise, shift)
    Y = simulate_decoupled(model, limit, epsilon, grid, noise, shift).values
    scale = np.sqrt(epsilon) * lam
    ref = limit.values[None, :, :]
    return {
        "xbar": PathEnsemble(grid, (X - ref) / scale, "deviation"),
        "ybar": PathEnsemble(grid, (Y - ref) / scale, "decoupled_deviation"),
        "limit": limit,
    }
