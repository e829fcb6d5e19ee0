"""Coefficient models and sampled checks of their regularity assumptions.

A model bundles the drift ``b_t(x, mu)``, the diffusion ``sigma_t(x, mu)``,
their analytic spatial Jacobian and Lions derivative, and a Lipschitz bound
``K(t)``. All callables are vectorised: ``x`` has shape ``(..., d)`` and the
outputs carry the same leading shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractViolation, UnsupportedCapability
from .measure import EmpiricalMeasure, dirac, perturb, wasserstein2


@dataclass(frozen=True)
class CoefficientModel:
    dim: int
    drift: Callable
    diffusion: Callable
    grad_drift: Callable
    lderiv_drift: Callable | None
    lipschitz_bound: Callable
    name: str = "custom"
    params: dict = field(default_factory=dict)
    # True when b and sigma ignore the measure argument entirely
    measure_free: bool = False

    def _check(self, x, mu):
        x = np.asarray(x, dtype=float)
        if x.ndim == 0:
            x = x.reshape(1)
        if x.shape[-1] != self.dim:
            raise ContractViolation(f"state has dimension {x.shape[-1]}, model has {self.dim}")
        if mu.dim != self.dim:
            raise ContractViolation(f"measure has dimension {mu.dim}, model has {self.dim}")
        return x

    def eval_drift(self, t, x, mu):
        out = np.asarray(self.drift(t, self._check(x, mu), mu), dtype=float)
        if not np.all(np.isfinite(out)):
            raise ContractViolation("drift returned non-finite values")
        return out

    def eval_diffusion(self, t, x, mu):
        return np.asarray(self.diffusion(t, self._check(x, mu), mu), dtype=float)

    def eval_grad(self, t, x, mu):
        return np.asarray(self.grad_drift(t, self._check(x, mu), mu), dtype=float)

    def eval_lderivative(self, t, x, mu, y):
        if self.lderiv_drift is None:
            raise UnsupportedCapability(f"model {self.name!r} has no analytic L-derivative")
        x = self._check(x, mu)
        y = np.asarray(y, dtype=float)
        if y.ndim == 0:
            y = y.reshape(1)
        if y.shape[-1] != self.dim:
            raise ContractViolation("L-derivative point has wrong dimension")
        return np.asarray(self.lderiv_drift(t, x, mu, y), dtype=float)


def eval_drift(model, t, x, mu):
    return model.eval_drift(t, x, mu)


def eval_lderivative(model, t, x, mu, y):
    return model.eval_lderivative(t, x, mu, y)


def _const_matrix(value, x):
    return np.full(x.shape[:-1] + (1, 1), float(value))


def linear_mean_field(a: float, c: float, s: float) -> CoefficientModel:
    """Scalar model b(x, mu) = a x + c mean(mu), sigma = s."""
    a, c, s = float(a), float(c), float(s)
    K = max(abs(a) + abs(c), abs(s))

    def drift(t, x, mu):
        return a * x + c * mu.mean()

    return CoefficientModel(
        dim=1,
        drift=drift,
        diffusion=lambda t, x, mu: _const_matrix(s, x),
        grad_drift=lambda t, x, mu: _const_matrix(a, x),
        lderiv_drift=lambda t, x, mu, y: _const_matrix(c, np.broadcast_to(x, np.broadcast_shapes(x.shape, y.shape))),
        lipschitz_bound=lambda t: K,
        name="linear_mean_field",
        params={"a": a, "c": c, "s": s},
        measure_free=(c == 0.0),
    )


def kuramoto(coupling: float, omega: float, s: float) -> CoefficientModel:
    """Scalar mean-field Kuramoto drift omega + K int sin(y - x) mu(dy)."""
    k, w, s = float(coupling), float(omega), float(s)
    K = max(abs(w) + abs(k), abs(w) + abs(s))

    def moments(mu):
        return mu.expect(np.sin(mu.atoms[:, 0])), mu.expect(np.cos(mu.atoms[:, 0]))

    def drift(t, x, mu):
        ms, mc = moments(mu)
        # sin(y - x) = sin y cos x - cos y sin x keeps the cost linear in the atom count
        return w + k * (ms * np.cos(x) - mc * np.sin(x))

    def grad(t, x, mu):
        ms, mc = moments(mu)
        return (-k * (ms * np.sin(x) + mc * np.cos(x)))[..., None]

    def lderiv(t, x, mu, y):
        return (k * np.cos(y - x))[..., None]

    return CoefficientModel(
        dim=1,
        drift=drift,
        diffusion=lambda t, x, mu: _const_matrix(s, x),
        grad_drift=grad,
        lderiv_drift=lderiv,
        lipschitz_bound=lambda t: K,
        name="kuramoto",
        params={"coupling": k, "omega": w, "s": s},
        measure_free=(k == 0.0),
    )


BUILTINS = {
    "linear_mean_field": (linear_mean_field, ("a", "c", "s")),
    "kuramoto": (kuramoto, ("coupling", "omega", "s")),
}


def build_model(spec: dict) -> CoefficientModel:
    """Instantiate a built-in model from ``{"kind": ..., **params}``."""
    kind = spec.get("kind")
    if kind not in BUILTINS:
        raise UnsupportedCapability(f"unknown model kind {kind!r}; known: {sorted(BUILTINS)}")
    factory, names = BUILTINS[kind]
    missing = [n for n in names if n not in spec]
    if missing:
        raise ContractViolation(f"model {kind!r} is missing parameters {missing}")
    return factory(*(float(spec[n]) for n in names))


def _opnorm(m):
    m = np.atleast_2d(m)
    return float(np.linalg.norm(m, ord=2)) if m.shape[0] > 1 else float(abs(m[0, 0]))


# ---------------------------------------------------------------------------
# sampled assumption checks


@dataclass
class LipschitzReport:
    max_ratio: float
    witness: tuple | None
    violation: bool
    evaluated: int
    skipped: int
    bound: float


def sample_pairs(dim, count, rng, scale=3.0, atoms=4):
    """Random ((x, mu), (y, nu)) pairs with small uniform measures."""
    pairs = []
    for _ in range(count):
        x, y = rng.uniform(-scale, scale, size=(2, dim))
        mu = EmpiricalMeasure(rng.uniform(-scale, scale, size=(atoms, dim)))
        nu = EmpiricalMeasure(rng.uniform(-scale, scale, size=(atoms, dim)))
        pairs.append(((x, mu), (y, nu)))
    return pairs


def check_lipschitz(model, sample_pairs: Sequence, t_grid=(0.0,), tolerance=1e-9) -> LipschitzReport:
    max_ratio, witness, skipped, evaluated = 0.0, None, 0, 0
    violation = False
    bound = 0.0
    for t in t_grid:
        K = float(model.lipschitz_bound(t))
        bound = max(bound, K)
        for (x, mu), (y, nu) in sample_pairs:
            dist = float(np.linalg.norm(np.asarray(x, float) - np.asarray(y, float))) + wasserstein2(mu, nu)
            if dist == 0.0:
                skipped += 1
                continue
            db = np.linalg.norm(model.eval_drift(t, x, mu) - model.eval_drift(t, y, nu))
            ds = _opnorm(model.eval_diffusion(t, x, mu) - model.eval_diffusion(t, y, nu))
            ratio = float((db + ds) / dist)
            evaluated += 1
            if ratio > max_ratio:
                max_ratio, witness = ratio, (t, x, mu, y, nu)
            if ratio > K * (1.0 + tolerance):
                violation = True
    return LipschitzReport(max_ratio, witness, violation, evaluated, skipped, bound)


def check_growth_at_origin(model, t=0.0) -> tuple[float, float]:
    """Return (|b_t(0, delta_0)| + ||sigma_t(0, delta_0)||, K(t))."""
    zero = np.zeros(model.dim)
    d0 = dirac(zero)
    lhs = float(np.linalg.norm(model.eval_drift(t, zero, d0))) + _opnorm(model.eval_diffusion(t, zero, d0))
    return lhs, float(model.lipschitz_bound(t))


def check_gradient(model, t, x, mu, step=1e-5) -> float:
    """Largest relative deviation of grad_drift from central differences."""
    x = np.asarray(x, dtype=float).reshape(model.dim)
    jac = model.eval_grad(t, x, mu).reshape(model.dim, model.dim)
    fd = np.empty_like(jac)
    for j in range(model.dim):
        e = np.zeros(model.dim)
        e[j] = step
        fd[:, j] = (model.eval_drift(t, x + e, mu) - model.eval_drift(t, x - e, mu)).reshape(-1) / (2 * step)
    return float(np.max(np.abs(fd - jac) / (1.0 + np.abs(jac))))


@dataclass
class LDerivativeReport:
    eps_ladder: np.ndarray
    quotients: np.ndarray
    reference: np.ndarray
    errors: np.ndarray
    extrapolated_error: float


def check_lderivative(model, t, mu, y_field, eps_ladder=(1e-2, 1e-3, 1e-4, 1e-5), x=None) -> LDerivativeReport:
    """Compare difference quotients along ``mu o (Id + eps phi)^-1`` with the
    atom average of ``<D^L b(x, .)(mu)(xi_i), phi(xi_i)>``.

    The last two rungs are combined by linear Richardson extrapolation.
    """
    eps = np.asarray(eps_ladder, dtype=float)
    if eps.ndim != 1 or eps.size == 0 or np.any(eps <= 0) or np.any(np.diff(eps) >= 0):
        raise ContractViolation("eps_ladder must be strictly decreasing positive numbers")
    x = np.zeros(model.dim) if x is None else np.asarray(x, dtype=float).reshape(model.dim)
    phi = y_field(mu.atoms) if callable(y_field) else y_field
    phi = np.asarray(phi, dtype=float).reshape(mu.atoms.shape)

    lmat = model.eval_lderivative(t, np.broadcast_to(x, mu.atoms.shape), mu, mu.atoms)
    reference = mu.expect(np.einsum("mij,mj->mi", lmat, phi))
    base = model.eval_drift(t, x, mu)
    quotients = np.array([(model.eval_drift(t, x, perturb(mu, e * phi)) - base) / e for e in eps])
    errors = np.linalg.norm(quotients - reference, axis=1)
    if eps.size >= 2:
        e1, e2 = eps[-2], eps[-1]
        extrap = (e1 * quotients[-1] - e2 * quotients[-2]) / (e1 - e2)
        extrapolated = float(np.linalg.norm(extrap - reference))
    else:
        extrapolated = float(errors[-1])
    return LDerivativeReport(eps, quotients, reference, errors, extrapolated)
