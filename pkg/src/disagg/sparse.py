"""Block-sparse grids and the boundary/non-boundary kernel split.

Active voxels are stored in fixed-size blocks (``block_edge`` per axis).
A population of component ``c`` at voxel ``local`` of the block in list
position ``k`` lives at ``k*q*B + c*B + local`` (SoA inside each block).

Voxels that carry a regularized (velocity-prescribed) condition need the
expensive reconstruction; all others only need the plain pull-collide.
Three dispatch strategies decide which kernel touches which voxel:

* ``Naive``: one kernel over every block, per-voxel metadata inline.
* ``DisagBitmask``: two kernels over every block, a per-block bitmask and
  a compact velocity buffer addressed through a per-voxel index.
* ``DisagMem``: blocks holding boundary voxels are stored first, so each
  kernel covers only its own group; the velocity comes from the face rule.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractViolation, InputError
from .lattice import build_lattice
from .lbm import build_pull_table, check_stable, linear_index, regularize

__all__ = [
    "BlockSparseGrid",
    "BlockClass",
    "Classification",
    "Strategy",
    "Arrangement",
    "DispatchPlan",
    "KernelSpec",
    "FaceVelocity",
    "SparseLBM",
    "build_block_sparse",
    "classify_blocks",
    "arrange",
    "dispatch_plan",
    "execute_plan",
]


class BlockSparseGrid:
    """Blocks of ``block_edge**dim`` voxels with per-block activity masks."""

    def __init__(self, block_edge, origins, masks, domain_shape=None):
        self.block_edge = int(block_edge)
        self.origins = np.asarray(origins, dtype=np.int64)
        self.masks = np.asarray(masks, dtype=bool)
        self.dim = self.origins.shape[1]
        self.block_size = self.block_edge ** self.dim
        if self.masks.shape != (self.origins.shape[0], self.block_size):
            raise InputError("one activity mask of block_size bits per block is required")
        if np.any(self.origins % self.block_edge):
            raise InputError("block origins must be multiples of the block edge")
        bc = self.origins // self.block_edge
        self.index = {tuple(int(v) for v in c): k for k, c in enumerate(bc)}
        if len(self.index) != len(bc):
            raise InputError("duplicate blocks")
        hi = (bc.max(axis=0) + 1) * self.block_edge if len(bc) else np.zeros(self.dim, int)
        self.domain_shape = tuple(int(v) for v in (hi if domain_shape is None else domain_shape))
        self._nbk = tuple(-(-s // self.block_edge) for s in self.domain_shape)
        self._lookup = np.full(self._nbk[::-1], -1, dtype=np.int64)
        for k, c in enumerate(bc):
            if np.any(c < 0) or np.any(c >= self._nbk):
                raise InputError(f"block {c.tolist()} lies outside the domain")
            self._lookup[tuple(c[::-1])] = k
        e = self.block_edge
        loc = np.arange(self.block_size)
        self._local_offsets = np.stack([(loc // e ** d) % e for d in range(self.dim)], axis=1)

    @property
    def num_blocks(self):
        return self.origins.shape[0]

    @property
    def num_active(self):
        return int(self.masks.sum())

    def slots(self):
        """Storage slots ``k*B + local`` of all active voxels, storage order."""
        return np.flatnonzero(self.masks.ravel())

    def coords_of(self, slots):
        s = np.asarray(slots, dtype=np.int64)
        k, local = np.divmod(s, self.block_size)
        return self.origins[k] + self._local_offsets[local]

    def active_coords(self):
        return self.coords_of(self.slots())

    def slot_of(self, coords):
        """Slot of each (n, dim) coordinate, -1 where no active voxel exists."""
        c = np.asarray(coords, dtype=np.int64)
        ok = np.all((c >= 0) & (c < np.array(self.domain_shape)), axis=1)
        cc = np.where(ok[:, None], c, 0)
        bc = cc // self.block_edge
        k = self._lookup[tuple(bc[:, d] for d in range(self.dim - 1, -1, -1))]
        lo = cc - bc * self.block_edge
        local = np.zeros(c.shape[0], dtype=np.int64)
        for d in range(self.dim - 1, -1, -1):
            local = local * self.block_edge + lo[:, d]
        slot = k * self.block_size + local
        ok &= k >= 0
        ok &= self.masks.ravel()[np.where(ok, slot, 0)]
        return np.where(ok, slot, -1)

    def address(self, slots, comp, q):
        k, local = np.divmod(np.asarray(slots, dtype=np.int64), self.block_size)
        return k * q * self.block_size + comp * self.block_size + local

    def buffer_len(self, q):
        return self.num_blocks * q * self.block_size

    def permuted(self, order):
        order = np.asarray(order, dtype=np.int64)
        return BlockSparseGrid(self.block_edge, self.origins[order], self.masks[order], self.domain_shape)

    def canonical_order(self):
        """Slots of active voxels sorted by canonical (x fastest) domain index."""
        slots = self.slots()
        lin = linear_index(self.coords_of(slots), self.domain_shape)
        return slots[np.argsort(lin, kind="stable")]

    def to_dict(self):
        return {
            "block_edge": self.block_edge,
            "domain_shape": list(self.domain_shape),
            "blocks": [{"origin": o.tolist(), "active": int(m.sum())} for o, m in zip(self.origins, self.masks)],
        }


def build_block_sparse(active_voxels, block_edge=4, domain_shape=None):
    """Minimal block set covering ``active_voxels`` (n, dim) coordinates,
    blocks in canonical order (x fastest over block coordinates)."""
    if block_edge < 1:
        raise InputError(f"block edge must be >= 1, got {block_edge}")
    v = np.asarray(active_voxels, dtype=np.int64)
    if v.ndim != 2 or v.shape[0] == 0:
        raise InputError("active voxel set must be a non-empty (n, dim) array")
    if np.any(v < 0):
        raise InputError("voxel coordinates must be non-negative")
    dim = v.shape[1]
    bc = v // block_edge
    nbk = bc.max(axis=0) + 1
    if domain_shape is not None:
        nbk = np.maximum(nbk, [-(-s // block_edge) for s in domain_shape])
    key = linear_index(bc, tuple(int(n) for n in nbk))
    uniq, inv = np.unique(key, return_inverse=True)
    origins = np.empty((uniq.size, dim), dtype=np.int64)
    rem = uniq.copy()
    for d in range(dim):
        origins[:, d] = (rem % nbk[d]) * block_edge
        rem //= nbk[d]
    lo = v - bc * block_edge
    local = np.zeros(v.shape[0], dtype=np.int64)
    for d in range(dim - 1, -1, -1):
        local = local * block_edge + lo[:, d]
    masks = np.zeros((uniq.size, block_edge ** dim), dtype=bool)
    masks[inv.reshape(-1), local] = True
    return BlockSparseGrid(block_edge, origins, masks, domain_shape)


class BlockClass(enum.IntEnum):
    NonBoundary = 0
    Boundary = 1


@dataclass(frozen=True)
class Classification:
    tags: np.ndarray  # (num_blocks,) BlockClass codes
    voxel_mask: np.ndarray  # (num_blocks * B,) boundary voxels by slot

    @property
    def n_b(self):
        return int((self.tags == BlockClass.Boundary).sum())

    @property
    def n_nb(self):
        return int((self.tags == BlockClass.NonBoundary).sum())


def classify_blocks(grid, boundary_pred):
    """Tag blocks holding at least one voxel for which the predicate holds.

    ``boundary_pred`` maps (n, dim) coordinates of active voxels to booleans.
    """
    slots = grid.slots()
    hit = np.asarray(boundary_pred(grid.coords_of(slots)), dtype=bool)
    voxel_mask = np.zeros(grid.num_blocks * grid.block_size, dtype=bool)
    voxel_mask[slots[hit]] = True
    per_block = voxel_mask.reshape(grid.num_blocks, grid.block_size).any(axis=1)
    tags = np.where(per_block, BlockClass.Boundary, BlockClass.NonBoundary).astype(np.int8)
    return Classification(tags, voxel_mask)


class Strategy(str, enum.Enum):
    Naive = "Naive"
    DisagBitmask = "DisagBitmask"
    DisagMem = "DisagMem"


@dataclass
class Arrangement:
    strategy: Strategy
    grid: BlockSparseGrid
    classes: Classification
    order: np.ndarray  # new position -> original block index
    block_bitmask: np.ndarray | None = None  # (num_blocks,) bool
    voxel_index: np.ndarray | None = None  # (num_blocks * B,) compact id or -1


def arrange(strategy, grid, classes):
    strategy = Strategy(strategy)
    nb = grid.num_blocks
    if strategy is Strategy.DisagMem:
        order = np.concatenate([np.flatnonzero(classes.tags == BlockClass.Boundary),
                                np.flatnonzero(classes.tags == BlockClass.NonBoundary)])
        new = grid.permuted(order)
        vm = classes.voxel_mask.reshape(nb, grid.block_size)[order].ravel()
        return Arrangement(strategy, new, Classification(classes.tags[order], vm), order)
    order = np.arange(nb)
    if strategy is Strategy.DisagBitmask:
        bits = classes.tags == BlockClass.Boundary
        # compact ids by prefix sum over boundary voxels in canonical voxel order
        canon = grid.canonical_order()
        flags = classes.voxel_mask[canon]
        ids = np.cumsum(flags) - 1
        index = np.full(nb * grid.block_size, -1, dtype=np.int64)
        index[canon[flags]] = ids[flags]
        return Arrangement(strategy, grid, classes, order, bits, index)
    return Arrangement(strategy, grid, classes, order)


@dataclass(frozen=True)
class KernelSpec:
    name: str
    blocks: int
    cost: int


@dataclass(frozen=True)
class DispatchPlan:
    strategy: Strategy
    kernels: tuple
    extra_storage: int
    indexing: str

    @property
    def peak_cost(self):
        return max(k.cost for k in self.kernels)

    @property
    def work(self):
        """Sum over kernels of blocks covered times cost units."""
        return sum(k.blocks * k.cost for k in self.kernels)

    def to_dict(self):
        return {
            "strategy": self.strategy.value,
            "kernels": [{"name": k.name, "blocks": k.blocks, "cost": k.cost} for k in self.kernels],
            "extra_storage_bytes": self.extra_storage,
            "indexing": self.indexing,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def dispatch_plan(strategy, n_b, n_nb, q, block_size, s_w, s_i, naive_storage="printed"):
    """Kernel launches, cost units and boundary-metadata storage of a strategy.

    ``naive_storage="textual"`` charges the naive layout for metadata in
    every block instead of the printed ``s_w * n_nb * block_size``.
    """
    strategy = Strategy(strategy)
    for name, v in (("n_b", n_b), ("n_nb", n_nb), ("q", q), ("block_size", block_size), ("s_w", s_w), ("s_i", s_i)):
        if v < 0:
            raise InputError(f"{name} must be >= 0, got {v}")
    heavy, light = 3 * q, 2 * q
    total = n_b + n_nb
    if strategy is Strategy.Naive:
        if naive_storage == "printed":
            storage = s_w * n_nb * block_size
        elif naive_storage == "textual":
            storage = s_w * total * block_size
        else:
            raise InputError(f"naive_storage must be 'printed' or 'textual', got {naive_storage!r}")
        return DispatchPlan(strategy, (KernelSpec("collide_stream", total, heavy),), storage, "Direct")
    if strategy is Strategy.DisagBitmask:
        return DispatchPlan(
            strategy,
            (KernelSpec("boundary", total, heavy), KernelSpec("interior", total, light)),
            s_i * total * block_size,
            "Indirect",
        )
    return DispatchPlan(
        strategy,
        (KernelSpec("boundary", n_b, heavy), KernelSpec("interior", n_nb, light)),
        0,
        "Direct",
    )


@dataclass(frozen=True)
class FaceVelocity:
    """Velocity-prescribed faces of the domain box.

    A voxel carries the condition when it lies on one of ``faces`` (given as
    ``(axis, side, velocity)`` with side 0 = low, 1 = high), inside the face
    proper (not on its edges), and its only missing axis neighbour is the
    one outside that face.
    """

    domain_shape: tuple
    faces: tuple

    def select(self, grid, coords):
        """(mask, inward normals (n, dim), velocities (dim, n)) for coords."""
        c = np.asarray(coords, dtype=np.int64)
        n, dim = c.shape
        mask = np.zeros(n, dtype=bool)
        normals = np.zeros((n, dim), dtype=np.int64)
        vel = np.zeros((dim, n))
        for axis, side, u in self.faces:
            on = c[:, axis] == (0 if side == 0 else self.domain_shape[axis] - 1)
            for d in range(dim):
                if d != axis:
                    on &= (c[:, d] > 0) & (c[:, d] < self.domain_shape[d] - 1)
            for d in range(dim):
                for s in (-1, 1):
                    if d == axis and s == (-1 if side == 0 else 1):
                        continue
                    off = np.zeros(dim, dtype=np.int64)
                    off[d] = s
                    on &= grid.slot_of(c + off) >= 0
            on &= ~mask
            mask |= on
            normals[on, axis] = 1 if side == 0 else -1
            vel[:, on] = np.asarray(u, dtype=np.float64)[:, None]
        return mask, normals, vel

    def predicate(self, grid):
        return lambda coords: self.select(grid, coords)[0]


class _Sweep:
    """Precomputed tables of one kernel: plain voxels and regularized voxels."""

    def __init__(self, name, blocks, plain, plain_dst, reg, reg_dst, normals, velocity):
        self.name = name
        self.blocks = blocks
        self.plain = plain
        self.plain_dst = plain_dst
        self.reg = reg
        self.reg_dst = reg_dst
        self.normals = normals
        self.velocity = velocity


class SparseLBM:
    """Pull-collide LBM on a block-sparse grid under one dispatch strategy.

    Missing or inactive neighbours bounce back.  ``faces`` selects the
    regularized voxels; how their velocity reaches the kernel depends on the
    strategy (inline buffer, compact buffer, or the face rule itself).
    """

    def __init__(self, grid, lattice, tau, strategy, faces=None, f0=None,
                 s_w=None, s_i=4, naive_storage="printed", debug=False):
        self.lattice = build_lattice(getattr(lattice, "kind", lattice))
        if grid.dim != self.lattice.dim:
            raise InputError("grid and lattice dimensions differ")
        if not tau > 0.5:
            raise InputError(f"tau must exceed 0.5, got {tau}")
        self.omega = 1.0 / float(tau)
        self.faces = faces if faces is not None else FaceVelocity(grid.domain_shape, ())
        self.debug = debug
        q = self.lattice.q
        classes = classify_blocks(grid, self.faces.predicate(grid))
        self.arrangement = arrange(strategy, grid, classes)
        self.strategy = self.arrangement.strategy
        self.grid = self.arrangement.grid
        self.classes = self.arrangement.classes
        s_w = 8 * grid.dim if s_w is None else s_w
        self.plan = dispatch_plan(self.strategy, classes.n_b, classes.n_nb, q, grid.block_size, s_w, s_i, naive_storage)
        self.s_w, self.s_i = s_w, s_i
        self.buffer = np.zeros(self.grid.buffer_len(q))
        if f0 is None:
            slots = self.grid.slots()
            for c in range(q):
                self.buffer[self.grid.address(slots, c, q)] = self.lattice.weights[c]
        else:
            self.load(f0)
        self._build()
        self.time = 0

    # -- setup -------------------------------------------------------------------------

    def _table(self, slots):
        g, q = self.grid, self.lattice.q
        coords = g.coords_of(slots)

        def addr(offset, comp):
            s = g.slot_of(coords + offset)
            return np.where(s >= 0, g.address(np.maximum(s, 0), comp, q), -1)

        return build_pull_table(self.lattice, coords, addr, g.domain_shape, None, g.buffer_len(q)).table

    def _dst(self, slots):
        q = self.lattice.q
        return np.stack([self.grid.address(slots, c, q) for c in range(q)])

    def _sweep(self, name, block_ids, reg_rule):
        g = self.grid
        B = g.block_size
        bm = np.zeros(g.num_blocks, dtype=bool)
        bm[block_ids] = True
        slots = g.slots()
        slots = slots[bm[slots // B]]
        reg_mask, normals, vel = reg_rule(slots)
        plain, reg = slots[~reg_mask], slots[reg_mask]
        return _Sweep(name, int(len(block_ids)), self._table(plain), self._dst(plain),
                      self._table(reg), self._dst(reg), normals[reg_mask], vel[:, reg_mask])

    def _build(self):
        g = self.grid
        nb = g.num_blocks
        B = g.block_size
        dim = g.dim
        all_blocks = np.arange(nb)
        none = (lambda s: (np.zeros(s.size, bool), np.zeros((s.size, dim), np.int64), np.zeros((dim, s.size))))
        if self.strategy is Strategy.Naive:
            # per-voxel inline metadata in every block
            mask, normals, vel = self.faces.select(g, g.coords_of(np.arange(nb * B)))
            mask &= g.masks.ravel()
            self.meta = {"condition": mask, "normal": normals, "velocity": vel}
            rule = lambda s: (self.meta["condition"][s], self.meta["normal"][s], self.meta["velocity"][:, s])
            self.sweeps = [self._sweep("collide_stream", all_blocks, rule)]
        elif self.strategy is Strategy.DisagBitmask:
            idx = self.arrangement.voxel_index
            n_ids = int(idx.max()) + 1 if idx.size and idx.max() >= 0 else 0
            have = idx >= 0
            _, normals, vel = self.faces.select(g, g.coords_of(np.flatnonzero(have)))
            compact_n = np.zeros((n_ids, dim), np.int64)
            compact_v = np.zeros((dim, n_ids))
            compact_n[idx[have]] = normals
            compact_v[:, idx[have]] = vel
            self.meta = {"bitmask": self.arrangement.block_bitmask, "index": idx,
                         "normal": compact_n, "velocity": compact_v}

            def rule(s):
                k = idx[s]
                hit = self.meta["bitmask"][s // B] & (k >= 0)
                kk = np.maximum(k, 0)
                return hit, compact_n[kk], compact_v[:, kk]

            def plain_rule(s):
                return none(s)

            bnd = self._sweep("boundary", all_blocks, rule)
            bnd.plain = bnd.plain[:, :0]
            bnd.plain_dst = bnd.plain_dst[:, :0]
            inter = self._sweep("interior", all_blocks, plain_rule)
            keep = idx[self._slots_of(inter.plain_dst)] < 0
            inter.plain = inter.plain[:, keep]
            inter.plain_dst = inter.plain_dst[:, keep]
            self.sweeps = [bnd, inter]
        else:
            self.meta = {}
            n_b = self.classes.n_b
            rule = lambda s: self.faces.select(g, g.coords_of(s))
            self.sweeps = [self._sweep("boundary", np.arange(n_b), rule),
                           self._sweep("interior", np.arange(n_b, nb), none)]

    def check_interior(self):
        """Raise if the face rule selects any voxel swept by the non-boundary kernel."""
        for sw in self.sweeps:
            if sw.name != "interior" or not sw.plain_dst.shape[1]:
                continue
            found = self.faces.select(self.grid, self.grid.coords_of(self._slots_of(sw.plain_dst)))[0]
            if np.any(found):
                raise ContractViolation("a regularized voxel reached the non-boundary kernel")

    def _slots_of(self, dst):
        q, B = self.lattice.q, self.grid.block_size
        k, rem = np.divmod(dst[0], q * B)
        return k * B + rem

    # -- state -----------------------------------------------------------------------

    def load(self, values):
        """Load (q, n_active) populations given in canonical voxel order."""
        q = self.lattice.q
        slots = self.grid.canonical_order()
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (q, slots.size):
            raise InputError(f"expected {(q, slots.size)} populations, got {v.shape}")
        for c in range(q):
            self.buffer[self.grid.address(slots, c, q)] = v[c]

    def field(self):
        """(q, n_active) populations in canonical voxel order."""
        q = self.lattice.q
        slots = self.grid.canonical_order()
        return np.stack([self.buffer[self.grid.address(slots, c, q)] for c in range(q)])

    @property
    def boundary_storage_bytes(self):
        """Bytes of boundary metadata this strategy actually holds."""
        g = self.grid
        if self.strategy is Strategy.Naive:
            return self.s_w * g.num_blocks * g.block_size
        if self.strategy is Strategy.DisagBitmask:
            return self.s_i * g.num_blocks * g.block_size
        return 0

    # -- stepping --------------------------------------------------------------------

    def step(self):
        report = execute_plan(self.plan, self, debug=self.debug)
        self.time += 1
        return report

    def run(self, steps):
        report = None
        for _ in range(steps):
            report = self.step()
            check_stable(self.buffer, self.time)
        return report


def execute_plan(plan, solver, debug=False, identity=False):
    """Run one step of ``solver`` following ``plan``; returns the execution report.

    With ``identity=True`` the kernels write back the values they read, which
    leaves the state unchanged but exercises the dispatch.
    """
    if plan.strategy is not solver.strategy or len(plan.kernels) != len(solver.sweeps):
        raise InputError("plan does not match the solver's arrangement")
    lat = solver.lattice
    e, w, omega = lat.velocities, lat.weights, solver.omega
    src = solver.buffer
    out = src.copy()
    launched = []
    if debug:
        solver.check_interior()
    for spec, sw in zip(plan.kernels, solver.sweeps):
        if sw.plain_dst.shape[1]:
            if identity:
                out[sw.plain_dst] = src[sw.plain_dst]
            else:
                out[sw.plain_dst] = kernels.gather_collide(src, sw.plain, e, w, omega)
        if sw.reg_dst.shape[1]:
            if identity:
                out[sw.reg_dst] = src[sw.reg_dst]
            else:
                pulled = kernels.gather(src, sw.reg)
                fixed = regularize(pulled, sw.velocity, sw.normals, lat)
                out[sw.reg_dst] = kernels.collide(fixed, e, w, omega)
        launched.append({"name": spec.name, "blocks": spec.blocks, "cost": spec.cost})
    solver.buffer = out
    return {
        "strategy": plan.strategy.value,
        "kernels": launched,
        "extra_storage_bytes": plan.extra_storage,
        "indexing": plan.indexing,
        "peak_cost": plan.peak_cost,
        "allocated_boundary_bytes": solver.boundary_storage_bytes,
    }
