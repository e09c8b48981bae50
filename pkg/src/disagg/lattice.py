"""Lattice velocity sets, equilibrium and moments.

Directions are kept in one canonical order for every lattice: the rest
direction first, then by speed class (axis, face diagonal, corner
diagonal), lexicographic on the velocity tuple within a class.  Layouts,
ledgers and field dumps all index components by this order.
"""

from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import kernels
from .errors import DegenerateStateError, DomainError, InputError

__all__ = [
    "LatticeKind",
    "Lattice",
    "build_lattice",
    "equilibrium",
    "macroscopic",
    "lid_correction",
]

CS2 = Fraction(1, 3)


class LatticeKind(str, enum.Enum):
    D2Q9 = "D2Q9"
    D3Q19 = "D3Q19"
    D3Q27 = "D3Q27"


# weight per squared speed |e|^2
_WEIGHTS = {
    LatticeKind.D2Q9: {0: Fraction(4, 9), 1: Fraction(1, 9), 2: Fraction(1, 36)},
    LatticeKind.D3Q19: {0: Fraction(1, 3), 1: Fraction(1, 18), 2: Fraction(1, 36)},
    LatticeKind.D3Q27: {
        0: Fraction(8, 27),
        1: Fraction(2, 27),
        2: Fraction(1, 54),
        3: Fraction(1, 216),
    },
}

_DIMS = {LatticeKind.D2Q9: 2, LatticeKind.D3Q19: 3, LatticeKind.D3Q27: 3}


def _readonly(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Lattice:
    """Immutable velocity-set descriptor."""

    kind: LatticeKind
    dim: int
    q: int
    velocities: np.ndarray  # (q, dim) int64
    weights_exact: tuple
    weights: np.ndarray  # (q,) float64
    opposite: np.ndarray  # (q,) int64
    cs2: Fraction = CS2

    def crossing(self, axis, sign=1):
        """Directions whose component along ``axis`` has the given sign, canonical order."""
        comp = self.velocities[:, axis]
        return np.flatnonzero(comp * sign > 0)

    @property
    def rest(self):
        return int(np.flatnonzero(~self.velocities.any(axis=1))[0])

    def to_dict(self):
        return {
            "kind": self.kind.value,
            "dim": self.dim,
            "q": self.q,
            "velocities": self.velocities.tolist(),
            "weights": [f"{w.numerator}/{w.denominator}" for w in self.weights_exact],
            "opposite": self.opposite.tolist(),
            "cs2": f"{self.cs2.numerator}/{self.cs2.denominator}",
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def __repr__(self):
        return f"Lattice({self.kind.value})"


_CACHE = {}


def build_lattice(kind) -> Lattice:
    kind = LatticeKind(kind)
    if kind in _CACHE:
        return _CACHE[kind]
    dim = _DIMS[kind]
    table = _WEIGHTS[kind]
    vel = [v for v in itertools.product((-1, 0, 1), repeat=dim) if sum(c * c for c in v) in table]
    vel.sort(key=lambda v: (sum(c * c for c in v), v))
    index = {v: i for i, v in enumerate(vel)}
    opp = [index[tuple(-c for c in v)] for v in vel]
    w_exact = tuple(table[sum(c * c for c in v)] for v in vel)
    lat = Lattice(
        kind=kind,
        dim=dim,
        q=len(vel),
        velocities=_readonly(np.array(vel, dtype=np.int64)),
        weights_exact=w_exact,
        weights=_readonly(np.array([float(w) for w in w_exact])),
        opposite=_readonly(np.array(opp, dtype=np.int64)),
    )
    _CACHE[kind] = lat
    return lat


def equilibrium(rho, u, lattice: Lattice):
    """Second-order BGK equilibrium.

    ``rho`` scalar or shape (n,), ``u`` shape (dim,) or (dim, n).  Returns
    (q,) or (q, n).
    """
    rho_a = np.asarray(rho, dtype=np.float64)
    u_a = np.asarray(u, dtype=np.float64)
    if u_a.shape[0] != lattice.dim:
        raise InputError(f"velocity has {u_a.shape[0]} components, lattice is {lattice.dim}D")
    if not (np.all(np.isfinite(rho_a)) and np.all(np.isfinite(u_a))):
        raise DomainError("non-finite density or velocity")
    scalar = rho_a.ndim == 0
    rho_v = np.atleast_1d(rho_a)
    u_v = u_a.reshape(lattice.dim, -1)
    if u_v.shape[1] != rho_v.shape[0]:
        u_v = np.broadcast_to(u_v, (lattice.dim, rho_v.shape[0]))
    feq = kernels.equilibrium(np.ascontiguousarray(rho_v), np.ascontiguousarray(u_v), lattice.velocities, lattice.weights)
    return feq[:, 0] if scalar else feq


def macroscopic(populations, lattice: Lattice):
    """Density and velocity of a (q,) or (q, n) population array."""
    f = np.asarray(populations, dtype=np.float64)
    scalar = f.ndim == 1
    f2 = np.ascontiguousarray(f.reshape(lattice.q, -1))
    if not np.all(np.isfinite(f2)):
        raise DomainError("non-finite populations")
    rho, u = kernels.moments(f2, lattice.velocities)
    if np.any(rho <= 0):
        bad = int(np.flatnonzero(rho <= 0)[0])
        raise DegenerateStateError(f"non-positive density {rho[bad]!r} at entry {bad}")
    if scalar:
        return float(rho[0]), u[:, 0]
    return rho, u


def lid_correction(lattice: Lattice, u_wall, rho_wall=1.0):
    """Per-direction moving-wall bounce-back term 2 w_i rho (e_i . u) / cs2."""
    u_wall = np.asarray(u_wall, dtype=np.float64)
    cu = lattice.velocities.astype(np.float64) @ u_wall
    return 2.0 * lattice.weights * rho_wall * cu * 3.0
