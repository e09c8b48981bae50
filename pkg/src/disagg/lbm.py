"""Collide-and-stream numerics, boundary conditions and the dense reference solver.

Population buffers hold post-collision values.  One time step pulls every
population from its upstream neighbour (``f_i(x) <- f*_i(x - e_i)``),
resolves pulls that have no fluid source with half-way bounce-back
(optionally with a moving-wall correction), reconstructs regularized
voxels, and collides.  Arrays of populations are shaped ``(q, n)`` with
voxels in canonical order (x fastest) unless stated otherwise.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    ConfigurationError,
    CoverageError,
    InputError,
    InstabilityError,
    NumericalError,
)
from .lattice import build_lattice, lid_correction

__all__ = [
    "Condition",
    "AxisMode",
    "BoundarySpec",
    "PullTable",
    "build_pull_table",
    "collide_bgk",
    "stream",
    "apply_boundary",
    "regularize",
    "boundary_slot_cost",
    "DenseSolver",
    "LBMKernel",
    "linear_index",
    "grid_coords",
    "total_mass",
    "bitwise_equal",
    "check_stable",
    "INSTABILITY_LIMIT",
    "RunResult",
    "run",
]

INSTABILITY_LIMIT = 1e3


class Condition(enum.IntEnum):
    NONE = 0
    BOUNCE_BACK = 1
    MOVING_LID = 2
    REGULARIZED = 3


class AxisMode(str, enum.Enum):
    PERIODIC = "periodic"
    WALL = "wall"  # static half-way bounce-back at both faces
    OPEN = "open"  # no condition; only regularized voxels may pull across


def boundary_slot_cost(condition, q):
    """Population slots a boundary voxel touches: reads plus writes."""
    condition = Condition(condition)
    if condition is Condition.REGULARIZED:
        return 3 * q
    if condition in (Condition.BOUNCE_BACK, Condition.MOVING_LID):
        return 2 * q
    return 0


def linear_index(coords, shape):
    """Canonical voxel index (x fastest) of (n, dim) coordinates."""
    c = np.asarray(coords, dtype=np.int64)
    idx = np.zeros(c.shape[:-1], dtype=np.int64)
    stride = 1
    for d, n in enumerate(shape):
        idx += c[..., d] * stride
        stride *= n
    return idx


def grid_coords(shape):
    """(N, dim) coordinates of all voxels in canonical order."""
    axes = [np.arange(n) for n in shape]
    mesh = np.meshgrid(*axes, indexing="ij")
    n = int(np.prod(shape))
    out = np.empty((n, len(shape)), dtype=np.int64)
    for d in range(len(shape)):
        # x fastest: transpose so the first axis varies quickest
        out[:, d] = mesh[d].transpose(tuple(range(len(shape)))[::-1]).ravel()
    return out


@dataclass
class BoundarySpec:
    """Boundary description of a dense box.

    ``axes`` gives the treatment of each axis' two faces.  A moving lid, when
    set, replaces the upper face of the last axis.  ``solid`` marks
    bounce-back obstacle voxels; ``regularized`` marks fluid voxels whose
    populations are reconstructed from the prescribed ``velocity``.
    """

    shape: tuple
    axes: tuple
    lid_velocity: np.ndarray | None = None
    solid: np.ndarray | None = None
    regularized: np.ndarray | None = None
    velocity: np.ndarray | None = None  # (dim, N) for regularized voxels
    _normals: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        dim = len(self.shape)
        self.axes = tuple(AxisMode(a) for a in self.axes)
        if len(self.axes) != dim:
            raise InputError(f"need {dim} axis modes, got {len(self.axes)}")
        n = int(np.prod(self.shape))
        if self.lid_velocity is not None:
            self.lid_velocity = np.asarray(self.lid_velocity, dtype=np.float64)
            if self.lid_velocity.shape != (dim,):
                raise InputError("lid velocity must have one component per axis")
            if self.axes[-1] is AxisMode.PERIODIC:
                raise ConfigurationError("a moving lid needs a non-periodic last axis")
        if self.solid is not None:
            self.solid = np.asarray(self.solid, dtype=bool).reshape(n)
        if self.regularized is not None:
            self.regularized = np.asarray(self.regularized, dtype=bool).reshape(n)
            if self.velocity is None:
                raise InputError("regularized voxels need a prescribed velocity")
            self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(dim, n)
            if self.solid is not None and np.any(self.solid & self.regularized):
                raise ConfigurationError("a voxel cannot be both solid and regularized")

    @property
    def dim(self):
        return len(self.shape)

    @property
    def size(self):
        return int(np.prod(self.shape))

    @property
    def periodic(self):
        return tuple(a is AxisMode.PERIODIC for a in self.axes)

    def conditions(self):
        """Per-voxel :class:`Condition` codes in canonical order."""
        out = np.zeros(self.size, dtype=np.int8)
        if self.lid_velocity is not None:
            top = grid_coords(self.shape)[:, -1] == self.shape[-1] - 1
            out[top] = Condition.MOVING_LID
        if self.solid is not None:
            out[self.solid] = Condition.BOUNCE_BACK
        if self.regularized is not None:
            out[self.regularized] = Condition.REGULARIZED
        return out

    def normals(self):
        """Inward unit normals (n_reg, dim) of the regularized voxels."""
        if self._normals is None:
            idx = np.flatnonzero(self.regularized) if self.regularized is not None else np.zeros(0, int)
            coords = grid_coords(self.shape)[idx]
            self._normals = inward_normals(coords, lambda c: self.has_fluid(c))
        return self._normals

    def has_fluid(self, coords):
        """True where coords (n, dim) address an in-domain, non-solid voxel."""
        c = np.array(coords, dtype=np.int64)
        ok = np.ones(c.shape[0], dtype=bool)
        for d, n in enumerate(self.shape):
            if self.axes[d] is AxisMode.PERIODIC:
                c[:, d] %= n
            else:
                ok &= (c[:, d] >= 0) & (c[:, d] < n)
        if self.solid is not None:
            idx = linear_index(np.where(ok[:, None], c, 0), self.shape)
            ok &= ~self.solid[idx]
        return ok

    @classmethod
    def cavity(cls, shape, lid_velocity):
        return cls(shape, ("wall",) * len(shape), lid_velocity=lid_velocity)

    @classmethod
    def periodic_box(cls, shape):
        return cls(shape, ("periodic",) * len(shape))

    @classmethod
    def channel(cls, shape, inflow_velocity, solid=None):
        """Walls on every face; velocity-prescribed (regularized) voxels on the
        interiors of both faces normal to x, obstacle voxels in ``solid``."""
        shape = tuple(shape)
        coords = grid_coords(shape)
        reg = (coords[:, 0] == 0) | (coords[:, 0] == shape[0] - 1)
        for d in range(1, len(shape)):
            reg &= (coords[:, d] > 0) & (coords[:, d] < shape[d] - 1)
        u = np.asarray(inflow_velocity, dtype=np.float64)
        vel = np.zeros((len(shape), coords.shape[0]))
        vel[:, reg] = u[:, None]
        return cls(shape, ("wall",) * len(shape), solid=solid, regularized=reg, velocity=vel)


def inward_normals(coords, has_fluid):
    """Inward normal of each voxel from its missing axis neighbours.

    ``has_fluid`` maps (n, dim) coordinates to a boolean array.  Exactly one
    missing axis neighbour is required; anything else is ambiguous.
    """
    coords = np.asarray(coords, dtype=np.int64)
    n, dim = coords.shape
    normals = np.zeros((n, dim), dtype=np.int64)
    missing = np.zeros(n, dtype=np.int64)
    for d in range(dim):
        for sign in (-1, 1):
            off = np.zeros(dim, dtype=np.int64)
            off[d] = sign
            gone = ~has_fluid(coords + off)
            normals[gone, d] = -sign
            missing += gone
    if np.any(missing != 1):
        k = int(np.flatnonzero(missing != 1)[0])
        raise ConfigurationError(
            f"regularized voxel {coords[k].tolist()} has {int(missing[k])} missing axis "
            "neighbours; the inward normal is ambiguous"
        )
    return normals


# -- pull tables ---------------------------------------------------------------


@dataclass
class PullTable:
    """Source index of every (direction, voxel) pull.

    ``table`` indexes the extended source ``[buffer, buffer[lid_src] +
    lid_corr, extra...]``.  Moving-wall values are derived from the buffer
    with one addition, so every engine produces the same doubles.
    """

    table: np.ndarray
    lid_src: np.ndarray
    lid_corr: np.ndarray
    n_buffer: int

    def ext(self, buffer, extra=None):
        parts = [buffer]
        if self.lid_src.size:
            parts.append(buffer[self.lid_src] + self.lid_corr)
        if extra is not None:
            parts.append(extra)
        return np.concatenate(parts) if len(parts) > 1 else buffer

    @property
    def n_ext(self):
        return self.n_buffer + self.lid_src.size


def build_pull_table(lattice, coords, neighbor_address, shape, lid_velocity, n_buffer):
    """Resolve pulls for voxels at global ``coords`` (n, dim).

    ``neighbor_address(offset, comp)`` returns the buffer address of
    component ``comp`` at ``coords + offset`` or -1 where there is no fluid
    source.  Missing sources bounce back; those beyond the upper face of the
    last axis take the moving-wall correction when ``lid_velocity`` is set.
    """
    coords = np.asarray(coords, dtype=np.int64)
    q, dim = lattice.q, lattice.dim
    n = coords.shape[0]
    table = np.empty((q, n), dtype=np.int64)
    corr = lid_correction(lattice, lid_velocity) if lid_velocity is not None else None
    zero = np.zeros(dim, dtype=np.int64)
    lid_src, lid_corr = [], []
    n_lid = 0
    for i in range(q):
        e = lattice.velocities[i]
        src = np.asarray(neighbor_address(-e, i), dtype=np.int64)
        missing = src < 0
        if np.any(missing):
            own = np.asarray(neighbor_address(zero, int(lattice.opposite[i])), dtype=np.int64)
            src = np.where(missing, own, src)
            if corr is not None:
                lid = missing & (coords[:, -1] - e[-1] >= shape[-1])
                k = np.flatnonzero(lid)
                if k.size:
                    lid_src.append(own[k])
                    lid_corr.append(np.full(k.size, corr[i]))
                    src[k] = n_buffer + n_lid + np.arange(k.size)
                    n_lid += k.size
        table[i] = src
    return PullTable(
        table=table,
        lid_src=np.concatenate(lid_src) if lid_src else np.zeros(0, dtype=np.int64),
        lid_corr=np.concatenate(lid_corr) if lid_corr else np.zeros(0),
        n_buffer=n_buffer,
    )


# -- elementary operations ------------------------------------------------------


def _flat(state, lattice):
    f = np.asarray(state, dtype=np.float64)
    if f.shape[0] != lattice.q:
        raise InputError(f"state has {f.shape[0]} components, lattice has {lattice.q}")
    return f.reshape(lattice.q, -1)


def _check_finite(f2, shape):
    bad = ~np.isfinite(f2)
    if np.any(bad):
        k = int(np.flatnonzero(bad.any(axis=0))[0])
        voxel = tuple(int(v) for v in np.unravel_index(k, shape)) if shape else (k,)
        raise NumericalError(f"non-finite population at voxel {voxel}", voxel=voxel)


def collide_bgk(state, tau, lattice):
    """BGK relaxation of a (q, ...) state; returns a new array of the same shape."""
    if not tau > 0.5:
        raise InputError(f"tau must exceed 0.5, got {tau}")
    f = np.asarray(state, dtype=np.float64)
    f2 = _flat(f, lattice)
    _check_finite(f2, f.shape[1:])
    out = kernels.collide(f2, lattice.velocities, lattice.weights, 1.0 / tau)
    return out.reshape(f.shape)


def _source_masks(spec, lattice):
    """Per direction: canonical indices whose pull has no fluid source, and
    which of those hit the moving lid."""
    coords = grid_coords(spec.shape)
    out = []
    for i in range(lattice.q):
        src = coords - lattice.velocities[i]
        missing = ~spec.has_fluid(src)
        if spec.solid is not None:
            missing &= ~spec.solid  # solid voxels are not updated
        idx = np.flatnonzero(missing)
        lid = np.zeros(idx.size, dtype=bool)
        if spec.lid_velocity is not None:
            lid = src[idx, -1] >= spec.shape[-1]
        for d, mode in enumerate(spec.axes):
            if mode is AxisMode.OPEN:
                crossing = (src[idx, d] < 0) | (src[idx, d] >= spec.shape[d])
                reg = spec.regularized[idx] if spec.regularized is not None else np.zeros(idx.size, bool)
                if np.any(crossing & ~reg):
                    k = idx[np.flatnonzero(crossing & ~reg)[0]]
                    raise CoverageError(
                        f"voxel {coords[k].tolist()} pulls direction {i} across an open face "
                        "with no boundary condition"
                    )
        out.append((idx, lid))
    return out


def stream(state, lattice, spec=None):
    """Pull streaming of a (q, *shape) state with bounce-back resolution.

    Without ``spec`` the box is periodic on every axis.  Values are only
    moved, never combined, except for the single moving-wall addition.
    """
    f = np.asarray(state, dtype=np.float64)
    shape = f.shape[1:]
    if spec is None:
        spec = BoundarySpec.periodic_box(shape)
    if tuple(shape) != spec.shape:
        raise InputError(f"state shape {shape} does not match boundary shape {spec.shape}")
    # grid view with x as the last (fastest) array axis
    rev = tuple(range(spec.dim))[::-1]
    g = f.transpose((0,) + tuple(1 + a for a in rev))
    out = np.empty(g.shape)
    for i in range(lattice.q):
        shifts = tuple(int(lattice.velocities[i][a]) for a in rev)
        out[i] = np.roll(g[i], shifts, axis=tuple(range(spec.dim)))
    flat_in = g.reshape(lattice.q, -1)
    flat_out = out.reshape(lattice.q, -1)
    masks = _cached_masks(spec, lattice)
    corr = lid_correction(lattice, spec.lid_velocity) if spec.lid_velocity is not None else None
    for i, (idx, lid) in enumerate(masks):
        o = int(lattice.opposite[i])
        vals = flat_in[o, idx]
        if corr is not None and np.any(lid):
            vals = vals.copy()
            vals[lid] = vals[lid] + corr[i]
        flat_out[i, idx] = vals
    if spec.solid is not None:
        flat_out[:, spec.solid] = flat_in[:, spec.solid]
    return out.transpose((0,) + tuple(1 + a for a in rev))


_MASK_CACHE = {}


def _cached_masks(spec, lattice):
    key = (id(spec), lattice.kind)
    hit = _MASK_CACHE.get(key)
    if hit is None or hit[0] is not spec:
        _MASK_CACHE[key] = (spec, _source_masks(spec, lattice))
    return _MASK_CACHE[key][1]


def regularize(f, velocity, normals, lattice):
    """Regularized reconstruction of post-stream populations (q, n).

    Density comes from the populations known after streaming (those not
    pointing along the inward normal) and the prescribed velocity; unknown
    non-equilibrium parts mirror their opposite direction; the result is
    the equilibrium plus the projection of the non-equilibrium stress.
    """
    f = np.asarray(f, dtype=np.float64)
    u = np.asarray(velocity, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.int64)
    q, dim = lattice.q, lattice.dim
    e = lattice.velocities
    w = lattice.weights
    opp = lattice.opposite
    out = np.empty_like(f)
    if f.shape[1] == 0:
        return out
    uniq, inv = np.unique(normals, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    for g, nvec in enumerate(uniq):
        sel = np.flatnonzero(inv == g)
        fs = f[:, sel]
        us = np.ascontiguousarray(u[:, sel])
        en = e @ nvec
        a = int(np.flatnonzero(nvec)[0])
        un = us[a] if nvec[a] > 0 else -us[a]
        denom = 1.0 - un
        if np.any(denom <= 0):
            raise ConfigurationError("density closure undefined: 1 - u.n <= 0 at a regularized voxel")
        par = np.zeros(sel.size)
        into = np.zeros(sel.size)
        for i in range(q):
            if en[i] == 0:
                par += fs[i]
            elif en[i] < 0:
                into += fs[i]
        rho = (par + 2.0 * into) / denom
        feq = kernels.equilibrium(rho, us, e, w)
        neq = np.empty_like(fs)
        for i in range(q):
            if en[i] <= 0:
                neq[i] = fs[i] - feq[i]
        for i in range(q):
            if en[i] > 0:
                neq[i] = neq[opp[i]]
        pi = {}
        for x in range(dim):
            for y in range(x, dim):
                acc = np.zeros(sel.size)
                for i in range(q):
                    c = e[i, x] * e[i, y]
                    if c > 0:
                        acc += neq[i]
                    elif c < 0:
                        acc -= neq[i]
                pi[x, y] = acc
        for i in range(q):
            s = np.zeros(sel.size)
            for x in range(dim):
                for y in range(dim):
                    qxy = float(e[i, x] * e[i, y]) - (1.0 / 3.0 if x == y else 0.0)
                    if qxy != 0.0:
                        s += qxy * pi[min(x, y), max(x, y)]
            out[i, sel] = feq[i] + 4.5 * w[i] * s
    return out


def apply_boundary(state, spec, lattice):
    """Apply per-voxel local conditions to a post-stream (q, *shape) state.

    Bounce-back and moving walls are resolved during streaming (they read
    the pre-stream values); this reconstructs the regularized voxels.
    """
    f = np.array(state, dtype=np.float64)
    if spec.regularized is None or not spec.regularized.any():
        return f
    f2 = _canonical(f, spec)
    idx = np.flatnonzero(spec.regularized)
    f2[:, idx] = regularize(f2[:, idx], spec.velocity[:, idx], spec.normals(), lattice)
    return _from_canonical(f2, spec)


def _canonical(f, spec):
    """(q, *shape) -> (q, N) in canonical (x fastest) order."""
    rev = tuple(range(spec.dim))[::-1]
    return np.ascontiguousarray(f.transpose((0,) + tuple(1 + a for a in rev))).reshape(f.shape[0], -1)


def _from_canonical(f2, spec):
    rev = tuple(range(spec.dim))[::-1]
    g = f2.reshape((f2.shape[0],) + tuple(spec.shape[a] for a in rev))
    return np.ascontiguousarray(g.transpose((0,) + tuple(1 + a for a in rev)))


def total_mass(f):
    """Exactly rounded sum of all populations."""
    return math.fsum(np.asarray(f, dtype=np.float64).ravel())


def bitwise_equal(a, b):
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    return a.shape == b.shape and np.array_equal(a.view(np.uint64), b.view(np.uint64))


def check_stable(f, step):
    f = np.asarray(f)
    if not np.all(np.isfinite(f)) or np.abs(f).max(initial=0.0) > INSTABILITY_LIMIT:
        raise InstabilityError(f"populations diverged at step {step}", step=step)


# -- dense solver ---------------------------------------------------------------


class DenseSolver:
    """Single-domain solver on a dense box.

    ``fused=False`` runs stream, apply_boundary and collide_bgk as separate
    sweeps over the whole box; ``fused=True`` pulls and collides in one
    traversal through a precomputed source table.  Both give identical bits.
    State ``f`` is (q, N) in canonical order.
    """

    def __init__(self, lattice, spec, tau, f0=None, fused=False):
        self.lattice = build_lattice(getattr(lattice, "kind", lattice))
        if spec.dim != self.lattice.dim:
            raise InputError(f"{self.lattice.kind.value} needs a {self.lattice.dim}D box")
        if not tau > 0.5:
            raise InputError(f"tau must exceed 0.5, got {tau}")
        self.spec = spec
        self.tau = float(tau)
        self.omega = 1.0 / self.tau
        self.fused = fused
        n = spec.size
        if f0 is None:
            f0 = np.repeat(self.lattice.weights[:, None], n, axis=1)
        self.f = np.array(f0, dtype=np.float64).reshape(self.lattice.q, n)
        self.time = 0
        self._fused_plan = None

    @property
    def shape(self):
        return self.spec.shape

    def grid(self):
        """State as (q, *shape) array indexed f[i, x, y, (z)]."""
        return _from_canonical(self.f, self.spec)

    def step(self):
        if self.fused:
            self.f = self._step_fused()
        else:
            g = stream(self.grid(), self.lattice, self.spec)
            g = apply_boundary(g, self.spec, self.lattice)
            f = _canonical(g, self.spec)
            upd = self._updated()
            if upd is None:
                self.f = collide_bgk(f, self.tau, self.lattice)
            else:
                out = f.copy()
                out[:, upd] = collide_bgk(f[:, upd], self.tau, self.lattice)
                self.f = out
        self.time += 1

    def _updated(self):
        if self.spec.solid is None:
            return None
        return np.flatnonzero(~self.spec.solid)

    def _plan(self):
        if self._fused_plan is None:
            spec, lat = self.spec, self.lattice
            n = spec.size
            upd = self._updated()
            vox = np.arange(n) if upd is None else upd
            coords = grid_coords(spec.shape)[vox]

            def addr(offset, comp):
                src = coords + offset
                ok = spec.has_fluid(src)
                wrapped = src.copy()
                for d, mode in enumerate(spec.axes):
                    if mode is AxisMode.PERIODIC:
                        wrapped[:, d] %= spec.shape[d]
                return np.where(ok, comp * n + linear_index(np.where(ok[:, None], wrapped, 0), spec.shape), -1)

            pt = build_pull_table(lat, coords, addr, spec.shape, spec.lid_velocity, lat.q * n)
            reg = spec.regularized[vox] if spec.regularized is not None else np.zeros(vox.size, bool)
            self._fused_plan = (vox, pt, np.flatnonzero(~reg), np.flatnonzero(reg))
        return self._fused_plan

    def _step_fused(self):
        lat = self.lattice
        vox, pt, plain, reg = self._plan()
        src = pt.ext(self.f.ravel())
        out = self.f.copy()
        out[:, vox[plain]] = kernels.gather_collide(src, pt.table[:, plain], lat.velocities, lat.weights, self.omega)
        if reg.size:
            pulled = kernels.gather(src, pt.table[:, reg])
            ridx = vox[reg]
            fixed = regularize(pulled, self.spec.velocity[:, ridx], self.spec.normals(), lat)
            out[:, ridx] = kernels.collide(fixed, lat.velocities, lat.weights, self.omega)
        return out

    def run(self, steps, check_every=1):
        for _ in range(steps):
            self.step()
            if check_every and self.time % check_every == 0:
                check_stable(self.f, self.time)
        return self.f


class LBMKernel:
    """Partition-engine kernel performing one fused pull-collide step."""

    radius = 1

    def __init__(self, lattice, tau, lid_velocity=None):
        self.lattice = build_lattice(getattr(lattice, "kind", lattice))
        if not tau > 0.5:
            raise InputError(f"tau must exceed 0.5, got {tau}")
        self.omega = 1.0 / float(tau)
        self.lid_velocity = None if lid_velocity is None else np.asarray(lid_velocity, dtype=np.float64)
        self.cardinality = self.lattice.q

    def prepare(self, nbhd):
        lat = self.lattice
        pt = build_pull_table(lat, nbhd.global_coords, nbhd.address, nbhd.domain_shape,
                              self.lid_velocity, nbhd.buffer_len)
        e, w, omega = lat.velocities, lat.weights, self.omega

        def run(buffer):
            return kernels.gather_collide(pt.ext(buffer), pt.table, e, w, omega)

        return run


# -- scenario runner ----------------------------------------------------------------


@dataclass
class RunResult:
    """Outcome of :func:`run`.

    ``field`` is the final (q, n) state in canonical order over the active
    voxels (finest-level state for multires, with ``level_fields`` holding
    every level).  ``diagnostics`` rows hold step, mass and max |u|.
    """

    config: object
    field: np.ndarray
    voxels: np.ndarray
    diagnostics: list
    centerline: np.ndarray
    reports: dict
    level_fields: list | None = None


def _initial_state(config, lattice, n):
    from .lattice import equilibrium

    rho = np.ones(n)
    u = np.zeros((lattice.dim, n))
    if config.scenario == "PeriodicBox":
        u += np.asarray(config.velocity, dtype=np.float64)[:, None]
    f = equilibrium(rho, u, lattice)
    if config.perturbation:
        rng = np.random.default_rng(config.seed)
        f = f * (1.0 + config.perturbation * (rng.random(f.shape) - 0.5))
    return f


def _solid_box(config):
    shape = config.shape
    if config.obstacle is None:
        return None
    coords = grid_coords(shape)
    lo, hi = np.asarray(config.obstacle["lo"]), np.asarray(config.obstacle["hi"])
    return np.all((coords >= lo) & (coords < hi), axis=1)


def _dense_spec(config):
    shape = config.shape
    if config.scenario == "LidDrivenCavity":
        return BoundarySpec.cavity(shape, config.velocity)
    if config.scenario == "PeriodicBox":
        return BoundarySpec.periodic_box(shape)
    return BoundarySpec.channel(shape, config.velocity, solid=_solid_box(config))


def _velocity_stats(f, lattice):
    rho, u = kernels.moments(np.ascontiguousarray(f), lattice.velocities)
    return rho, u


def _diag_row(step, mass, f, lattice):
    _, u = _velocity_stats(f, lattice)
    speed = np.sqrt(np.einsum("dn,dn->n", u, u)) if f.shape[1] else np.zeros(0)
    return {"step": int(step), "mass": float(mass), "max_u": float(speed.max(initial=0.0))}


def _centerline(velocity_x, coords, shape):
    """u_x along the last axis through the centre of the other axes (nan where inactive)."""
    line = np.full(shape[-1], np.nan)
    sel = np.all(coords[:, :-1] == np.array([s // 2 for s in shape[:-1]]), axis=1)
    line[coords[sel, -1]] = velocity_x[sel]
    return line


def run(config, progress=None):
    """Execute a :class:`~disagg.config.SolverConfig` on its engine."""
    lat = build_lattice(config.lattice)
    engine = config.engine
    every = config.diagnostics_every
    rows = []
    reports = {"engine": engine, "backend": kernels.backend()}

    def sampled(step):
        return step % every == 0 or step == config.steps

    def record(step, mass, f):
        rows.append(_diag_row(step, mass, f, lat))

    if engine in ("dense", "partitioned"):
        spec = _dense_spec(config)
        f0 = _initial_state(config, lat, spec.size)
        coords = grid_coords(config.shape)
        if engine == "dense":
            solver = DenseSolver(lat, spec, config.tau, f0=f0, fused=config.fused)
            state = lambda: solver.f
            buffers = lambda: (solver.f,)
            advance = solver.step
        else:
            from .commodel import layout_params
            from .partition import PartitionedField, TransferLedger, decompose, step_occ

            periodic = config.scenario == "PeriodicBox"
            decomp = decompose(config.shape, config.partitions, axis=-1, periodic=periodic)
            pf = PartitionedField(decomp, config.layout, lat, values=f0,
                                  periodic_axes=(periodic,) * lat.dim)
            kern = LBMKernel(lat, config.tau, spec.lid_velocity)
            ledger = TransferLedger()
            state = pf.gather
            buffers = lambda: [p.buffer for p in pf.parts]

            def advance():
                step_occ(pf, kern, ledger)

        record(0, total_mass(state()), state())
        for t in range(1, config.steps + 1):
            advance()
            for buf in buffers():
                check_stable(buf, t)
            if sampled(t):
                f = state()
                record(t, total_mass(f), f)
            if progress is not None:
                progress(t)
        f = state()
        if engine == "partitioned":
            s = int(np.prod(config.shape[:-1]))
            model = layout_params(lat.kind, config.layout, s)
            per_step = []
            for step in ledger.steps():
                for p in range(config.partitions):
                    a, b = ledger.params(step, p)
                    per_step.append({"step": step, "partition": p, "alpha": a, "beta": b})
            reports["ledger"] = {"model": {"alpha": model.alpha, "beta": model.beta},
                                 "per_step": per_step, "records": len(ledger)}
            reports["ledger_csv"] = ledger.to_csv()
        _, u = _velocity_stats(f, lat)
        return RunResult(config, f, coords, rows, _centerline(u[0], coords, config.shape), reports)

    if engine == "sparse":
        from .sparse import FaceVelocity, SparseLBM, build_block_sparse

        coords = grid_coords(config.shape)
        solid = _solid_box(config)
        active = coords if solid is None else coords[~solid]
        grid = build_block_sparse(active, config.block_edge, config.shape)
        u = tuple(float(v) for v in config.velocity)
        faces = FaceVelocity(config.shape, ((0, 0, u), (0, 1, u)))
        f0 = _initial_state(config, lat, active.shape[0])
        solver = SparseLBM(grid, lat, config.tau, config.strategy, faces=faces, f0=f0)
        record(0, total_mass(solver.field()), solver.field())
        report = None
        for t in range(1, config.steps + 1):
            report = solver.step()
            check_stable(solver.buffer, t)
            if sampled(t):
                f = solver.field()
                record(t, total_mass(f), f)
            if progress is not None:
                progress(t)
        f = solver.field()
        reports["dispatch"] = report if report is not None else solver.plan.to_dict()
        reports["classes"] = {"n_b": solver.classes.n_b, "n_nb": solver.classes.n_nb}
        vox = grid.coords_of(grid.canonical_order())
        _, uu = _velocity_stats(f, lat)
        return RunResult(config, f, vox, rows, _centerline(uu[0], vox, config.shape), reports)

    from .multires import MultiResGrid, MultiResSolver, build_execution_graph, centered_level_map

    mgrid = MultiResGrid(centered_level_map(config.shape, config.levels), config.block_edge)
    solver = MultiResSolver(mgrid, lat, config.tau, lid_velocity=config.velocity)
    graph = build_execution_graph(mgrid, config.fused)

    def multires_row(step):
        mx = max(_diag_row(step, 0.0, solver.field(l), lat)["max_u"] for l in range(mgrid.num_levels))
        rows.append({"step": step, "mass": solver.mass(), "max_u": mx})

    multires_row(0)
    for t in range(1, config.steps + 1):
        solver.step(graph)
        for buf in solver.states:
            check_stable(buf, t)
        if sampled(t):
            multires_row(t)
        if progress is not None:
            progress(t)
    ux = np.zeros(mgrid.shape)
    for l in range(mgrid.num_levels):
        g = mgrid.grids[l]
        _, uu = _velocity_stats(solver.field(l), lat)
        lc = g.coords_of(g.canonical_order())
        f = 2 ** l
        for c in itertools.product(range(f), repeat=mgrid.dim):
            p = lc * f + np.array(c)
            ux[tuple(p[:, d] for d in range(mgrid.dim))] = uu[0]
    coords = grid_coords(config.shape)
    line = _centerline(ux[tuple(coords[:, d] for d in range(mgrid.dim))], coords, config.shape)
    reports["graph"] = graph.stats()
    reports["distribution"] = mgrid.distribution()
    g0 = mgrid.grids[0]
    return RunResult(config, solver.field(0), g0.coords_of(g0.canonical_order()), rows, line, reports,
                     level_fields=[solver.field(l) for l in range(mgrid.num_levels)])
