"""Weighted empirical probability measures on R^d."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ContractViolation, UnsupportedCapability

MAX_ASSIGNMENT_ATOMS = 512


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """A finite particle cloud ``sum_i w_i delta_{atoms[i]}``.

    ``weights=None`` means uniform weights and is the fast path used by the
    particle solvers; it is never materialised unless asked for.
    """

    atoms: np.ndarray
    weights: np.ndarray | None = None
    _uniform: bool = field(init=False, repr=False, default=True)

    def __post_init__(self):
        atoms = np.asarray(self.atoms, dtype=float)
        if atoms.ndim == 0:
            atoms = atoms.reshape(1, 1)
        elif atoms.ndim == 1:
            atoms = atoms.reshape(-1, 1)
        if atoms.ndim != 2 or atoms.shape[0] < 1:
            raise ContractViolation("measure needs at least one atom, shape (M, d)")
        object.__setattr__(self, "atoms", atoms)
        if self.weights is None:
            return
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.shape[0] != atoms.shape[0]:
            raise ContractViolation("weights and atoms differ in length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ContractViolation("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "_uniform", bool(np.all(w == w[0])))

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    @property
    def size(self) -> int:
        return self.atoms.shape[0]

    @property
    def is_uniform(self) -> bool:
        return self._uniform

    def weight_vector(self) -> np.ndarray:
        if self.weights is None:
            return np.full(self.size, 1.0 / self.size)
        return self.weights

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Integrate per-atom values (leading axis = atoms) against the weights."""
        values = np.asarray(values, dtype=float)
        if self.weights is None:
            return values.mean(axis=0)
        return np.tensordot(self.weights, values, axes=(0, 0))

    def mean(self) -> np.ndarray:
        return self.expect(self.atoms)

    def second_moment(self) -> float:
        return float(self.expect(np.sum(self.atoms**2, axis=1)))


def dirac(x) -> EmpiricalMeasure:
    return EmpiricalMeasure(np.atleast_1d(np.asarray(x, dtype=float)).reshape(1, -1))


def uniform(atoms) -> EmpiricalMeasure:
    return EmpiricalMeasure(atoms)


def mean(mu: EmpiricalMeasure) -> np.ndarray:
    return mu.mean()


def second_moment(mu: EmpiricalMeasure) -> float:
    return mu.second_moment()


def perturb(mu: EmpiricalMeasure, phi: Callable | np.ndarray) -> EmpiricalMeasure:
    """Pushforward of ``mu`` under ``Id + phi``.

    ``phi`` is either a callable applied to the (M, d) atom array or an
    explicit (M, d) array of displacements, one per atom.
    """
    shift = phi(mu.atoms) if callable(phi) else phi
    shift = np.asarray(shift, dtype=float).reshape(mu.atoms.shape)
    return EmpiricalMeasure(mu.atoms + shift, mu.weights)


def _w2_1d(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    xa, xb = mu.atoms[:, 0], nu.atoms[:, 0]
    ia, ib = np.argsort(xa, kind="stable"), np.argsort(xb, kind="stable")
    xa, xb = xa[ia], xb[ib]
    wa, wb = mu.weight_vector()[ia], nu.weight_vector()[ib]
    if mu.weights is None and nu.weights is None and mu.size == nu.size:
        return float(np.sqrt(np.mean((xa - xb) ** 2)))
    ca, cb = np.cumsum(wa), np.cumsum(wb)
    ca[-1] = cb[-1] = 1.0
    # merged quantile levels; each interval maps to one atom on both sides
    levels = np.union1d(ca, cb)
    widths = np.diff(np.concatenate(([0.0], levels)))
    mids = levels - 0.5 * widths
    qa = xa[np.minimum(np.searchsorted(ca, mids), xa.size - 1)]
    qb = xb[np.minimum(np.searchsorted(cb, mids), xb.size - 1)]
    return float(np.sqrt(np.sum(widths * (qa - qb) ** 2)))


def wasserstein2(mu: EmpiricalMeasure, nu: EmpiricalMeasure) -> float:
    """Exact quadratic Wasserstein distance.

    d = 1 uses the quantile coupling for arbitrary weights. For d > 1 only
    uniform clouds of equal size (at most 512 atoms) are supported, solved as
    an optimal assignment.
    """
    if mu.dim != nu.dim:
        raise ContractViolation(f"dimension mismatch: {mu.dim} vs {nu.dim}")
    if mu.dim == 1:
        return _w2_1d(mu, nu)
    if not (mu.is_uniform and nu.is_uniform) or mu.size != nu.size:
        raise UnsupportedCapability("W2 in d > 1 needs uniform clouds of equal size")
    if mu.size > MAX_ASSIGNMENT_ATOMS:
        raise UnsupportedCapability(f"W2 in d > 1 is capped at {MAX_ASSIGNMENT_ATOMS} atoms")
    cost = np.sum((mu.atoms[:, None, :] - nu.atoms[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def to_csv_rows(mu: EmpiricalMeasure):
    """Rows (weight, component_0, ...) for debugging dumps."""
    w = mu.weight_vector()
    for i in range(mu.size):
        yield [repr(float(w[i]))] + [repr(float(v)) for v in mu.atoms[i]]
