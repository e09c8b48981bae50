"""Multi-resolution grids: a stack of block-sparse levels with refinement factor 2.

Level 0 is the finest.  The structure is given as a level map at the
finest resolution; each level stores its own cells in a
:class:`~disagg.sparse.BlockSparseGrid` at its own resolution.  One step of
level ``l+1`` contains two sub-steps of level ``l``.

Storage holds post-collision populations and a level step is
stream-then-collide.  Across an interface the finer level reads *ghost*
values from the coarser one (explosion) and the coarser level reads
averaged sub-cell values from the finer one (coalescence).  Both follow
the transport a virtual fine-resolution copy of the coarse region would
perform between coarse collisions: during the first fine sub-step a ghost
is a copy of its coarse parent, during the second it holds whatever one
extra fine hop brought in, and a coarse cell receives, per direction, the
mean over its fine sub-cells of what two fine hops deliver there.  Every
sub-cell packet is accounted for exactly once, so mass is conserved up to
rounding.

Blocks whose voxels all sit at least one voxel away from any other level
(jump distance >= 1) never read inter-level data, so their stream and
collide can be fused into one kernel; the remaining blocks stage
stream -> collide around the inter-level operators.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import InputError, StructureError
from .lattice import build_lattice
from .lbm import build_pull_table, check_stable
from .sparse import build_block_sparse

__all__ = [
    "MultiResGrid",
    "FusionClass",
    "Operator",
    "Node",
    "ExecutionGraph",
    "MultiResSolver",
    "build_multires",
    "jump_distance",
    "classify_fusion",
    "explosion",
    "coalescence",
    "build_execution_graph",
    "step_multires",
    "random_level_map",
    "centered_level_map",
    "scaled_tau",
    "MAX_LEVELS",
]

MAX_LEVELS = 4
UNREACHABLE = math.inf


def scaled_tau(tau_fine, levels):
    """Relaxation time of each level under convective scaling, finest first."""
    taus = [float(tau_fine)]
    for _ in range(1, levels):
        taus.append((taus[-1] + 0.5) / 2.0)
    return taus


def _block_reduce(a, f, fn):
    """Reduce an array over aligned f^dim blocks with ``fn`` (np.all / np.min ...)."""
    if f == 1:
        return a
    dim = a.ndim
    shp = []
    for n in a.shape:
        shp += [n // f, f]
    r = a.reshape(shp)
    return fn(r, axis=tuple(range(1, 2 * dim, 2)))


def _box_dilate(mask):
    return ndimage.binary_dilation(mask, structure=np.ones((3,) * mask.ndim, dtype=bool))


class MultiResGrid:
    """Validated level structure with per-level block-sparse grids.

    ``level_map`` is indexed ``[x, y, (z)]`` at the finest resolution.
    """

    def __init__(self, level_map, block_edge=4):
        lm = np.asarray(level_map)
        if lm.ndim not in (2, 3):
            raise StructureError("level map must be 2D or 3D")
        if not np.issubdtype(lm.dtype, np.integer):
            raise StructureError("level map must hold integer levels")
        lm = lm.astype(np.int64)
        self.level_map = lm
        self.shape = lm.shape
        self.dim = lm.ndim
        self.block_edge = block_edge
        present = np.unique(lm)
        if present.min() != 0:
            raise StructureError("level 0 (finest) must be present")
        self.num_levels = int(present.max()) + 1
        if self.num_levels > MAX_LEVELS:
            raise StructureError(f"at most {MAX_LEVELS} levels are supported")
        if present.size != self.num_levels:
            raise StructureError(f"levels must be contiguous from 0, got {present.tolist()}")
        top = 2 ** (self.num_levels - 1)
        if any(n % top for n in self.shape):
            raise StructureError(f"extents {self.shape} must be multiples of {top}")
        self.level_shapes = [tuple(n // 2 ** l for n in self.shape) for l in range(self.num_levels)]
        self._validate()
        # minimum level inside each level-l sized footprint
        self.minlevel = [_block_reduce(lm, 2 ** l, np.min) for l in range(self.num_levels)]
        self.masks = [self.minlevel[l] == l for l in range(self.num_levels)]
        for l in range(self.num_levels):
            mx = _block_reduce(lm, 2 ** l, np.max)
            self.masks[l] &= mx == l
        self.grids = []
        for l in range(self.num_levels):
            coords = np.argwhere(self.masks[l])
            self.grids.append(build_block_sparse(coords, block_edge, self.level_shapes[l]))

    def _validate(self):
        lm = self.level_map
        L = self.num_levels
        for l in range(L):
            f = 2 ** l
            m = lm == l
            if not np.array_equal(_block_reduce(m, f, np.all), _block_reduce(m, f, np.any)):
                raise StructureError(f"level {l} cells are not aligned to {f}-voxel footprints")
        adj = [_box_dilate(lm == m) for m in range(L)]
        for l in range(L):
            f = 2 ** l
            cell = _block_reduce(lm == l, f, np.all)
            if not cell.any():
                continue
            touches = [_block_reduce(adj[m], f, np.any) & cell for m in range(L)]
            for m in range(L):
                if abs(m - l) > 1 and touches[m].any():
                    raise StructureError(f"level {l} borders level {m}; jumps must be one level")
            if 0 < l < L - 1 and (touches[l - 1] & touches[l + 1]).any():
                raise StructureError(f"a level {l} cell borders both level {l - 1} and level {l + 1}")
            if l > 0 and touches[l - 1].any():
                edge = np.zeros_like(cell)
                for d in range(cell.ndim):
                    sl = [slice(None)] * cell.ndim
                    sl[d] = 0
                    edge[tuple(sl)] = True
                    sl[d] = -1
                    edge[tuple(sl)] = True
                if (touches[l - 1] & edge).any():
                    raise StructureError(
                        f"a level {l} cell bordering level {l - 1} lies on the domain boundary"
                    )

    # -- lookups -----------------------------------------------------------------------

    def inside(self, level, coords):
        c = np.asarray(coords, dtype=np.int64)
        return np.all((c >= 0) & (c < np.array(self.level_shapes[level])), axis=-1)

    def level_at(self, level, coords):
        """Minimum level within each level-``level`` footprint; -1 outside."""
        c = np.asarray(coords, dtype=np.int64)
        ok = self.inside(level, c)
        cc = np.where(ok[..., None], c, 0)
        out = self.minlevel[level][tuple(cc[..., d] for d in range(self.dim))]
        return np.where(ok, out, -1)

    def address(self, level, coords, comp, q):
        g = self.grids[level]
        s = g.slot_of(coords)
        if np.any(s < 0):
            raise StructureError(f"no level {level} cell at {np.asarray(coords)[s < 0][0].tolist()}")
        return g.address(s, comp, q)

    def distance_field(self, level):
        """Chebyshev jump distance of every level-``level`` position (float, inf if none)."""
        mask = self.masks[level]
        d0 = self.jump_zero(level)
        if not d0.any():
            return np.where(mask, UNREACHABLE, np.nan)
        dist = ndimage.distance_transform_cdt(~d0, metric="chessboard").astype(float)
        return np.where(mask, dist, np.nan)

    def jump_zero(self, level):
        """Cells of ``level`` with a box-stencil neighbour on another level."""
        mask = self.masks[level]
        other = np.zeros_like(mask)
        shp = self.level_shapes[level]
        pad = np.pad(self.minlevel[level], 1, constant_values=level)
        for off in itertools.product((-1, 0, 1), repeat=self.dim):
            sl = tuple(slice(1 + o, 1 + o + n) for o, n in zip(off, shp))
            other |= pad[sl] != level
        return mask & other

    def distribution(self):
        """Percent of each level's full grid that is active, finest first."""
        rows = []
        for l in range(self.num_levels):
            full = int(np.prod(self.level_shapes[l]))
            act = int(self.masks[l].sum())
            rows.append({"level": l, "active": act, "full": full, "percent": 100.0 * act / full})
        return rows

    def distribution_text(self):
        return "/".join(f"{r['percent']:.0f}%" for r in self.distribution())


def build_multires(level_map, block_edge=4):
    return MultiResGrid(level_map, block_edge)


def jump_distance(grid, level, voxel):
    v = np.asarray(voxel, dtype=np.int64)
    if not (grid.inside(level, v[None])[0] and grid.masks[level][tuple(v)]):
        raise InputError(f"voxel {v.tolist()} is not an active level {level} cell")
    return float(grid.distance_field(level)[tuple(v)])


class FusionClass(enum.IntEnum):
    Uniform = 0
    Jump = 1


@dataclass
class LevelClasses:
    tags: np.ndarray  # per block FusionClass
    uniform_blocks: np.ndarray
    jump_blocks: np.ndarray


def classify_fusion(grid):
    """Per level: a block is Jump iff it holds a voxel at jump distance 0."""
    out = []
    for l, g in enumerate(grid.grids):
        d0 = grid.jump_zero(l)
        coords = g.coords_of(g.slots())
        hit = d0[tuple(coords[:, d] for d in range(grid.dim))]
        per_block = np.zeros(g.num_blocks, dtype=bool)
        np.logical_or.at(per_block, g.slots()[hit] // g.block_size, True)
        tags = np.where(per_block, FusionClass.Jump, FusionClass.Uniform).astype(np.int8)
        out.append(LevelClasses(tags, np.flatnonzero(~per_block), np.flatnonzero(per_block)))
    return out


# -- inter-level operators --------------------------------------------------------------


@dataclass
class GhostLayer:
    """Fine-resolution positions inside the coarser level next to level ``level``.

    ``src[p]`` (q, n) indexes the concatenation ``[coarse buffer, level buffer
    at the start of the coarse step]`` for sub-step parity ``p``.
    """

    level: int
    coords: np.ndarray
    src: tuple


@dataclass
class Coalesced:
    """(coarse voxel, direction) pulls assembled from finer sub-cell traces.

    ``src`` (n, 2**dim) indexes ``[finer buffer at start, finer buffer after
    its first sub-step, level buffer at start]``.
    """

    level: int
    voxel: np.ndarray  # position in the level's slot order
    direction: np.ndarray
    src: np.ndarray


def _ghost_layer(grid, lat, l):
    """Ghosts of level ``l`` read from level ``l+1``."""
    q = lat.q
    g = grid.grids[l]
    coords = g.coords_of(g.slots())
    found = []
    for i in range(q):
        s = coords - lat.velocities[i]
        lv = grid.level_at(l, s)
        found.append(s[lv > l])
    if not found or not sum(len(f) for f in found):
        return GhostLayer(l, np.zeros((0, grid.dim), np.int64), (np.zeros((q, 0), np.int64),) * 2)
    allc = np.unique(np.concatenate(found), axis=0)
    n_coarse = grid.grids[l + 1].buffer_len(q)
    src0 = np.empty((q, len(allc)), dtype=np.int64)
    src1 = np.empty((q, len(allc)), dtype=np.int64)
    for i in range(q):
        src0[i] = grid.address(l + 1, allc // 2, i, q)
        r = allc - lat.velocities[i]
        lv = grid.level_at(l, r)
        if np.any((lv != l) & (lv != l + 1)):
            raise StructureError("explosion source lies outside the two interface levels")
        fine = lv == l
        a = np.empty(len(allc), dtype=np.int64)
        if fine.any():
            a[fine] = n_coarse + grid.address(l, r[fine], i, q)
        if (~fine).any():
            a[~fine] = grid.address(l + 1, r[~fine] // 2, i, q)
        src1[i] = a
    return GhostLayer(l, allc, (src0, src1))


def _corners(dim):
    # footprint offsets in canonical order (x fastest)
    return np.array([c[::-1] for c in itertools.product((0, 1), repeat=dim)], dtype=np.int64)


def _coalesced(grid, lat, l):
    """Coalescence entries of level ``l`` assembled from level ``l-1``."""
    q, dim = lat.q, grid.dim
    g = grid.grids[l]
    coords = g.coords_of(g.slots())
    corners = _corners(dim)
    nf = grid.grids[l - 1].buffer_len(q)
    vox, dirs, srcs = [], [], []
    for i in range(q):
        e = lat.velocities[i]
        touch = np.zeros(len(coords), dtype=bool)
        for c in corners:
            w = 2 * coords + c
            p1 = w - e
            r = p1 - e
            touch |= (grid.level_at(l - 1, p1) == l - 1) | (grid.level_at(l - 1, r) == l - 1)
        k = np.flatnonzero(touch)
        if not k.size:
            continue
        src = np.empty((k.size, len(corners)), dtype=np.int64)
        for j, c in enumerate(corners):
            w = 2 * coords[k] + c
            p1 = w - e
            r = p1 - e
            lp = grid.level_at(l - 1, p1)
            lr = grid.level_at(l - 1, r)
            a = np.empty(k.size, dtype=np.int64)
            fine1 = lp == l - 1
            fine0 = ~fine1 & (lr == l - 1)
            own = ~fine1 & ~fine0
            if np.any(~fine1 & (lp != l)) or np.any(own & (lr != l)):
                raise StructureError("coalescence trace leaves the two interface levels")
            if fine1.any():
                a[fine1] = nf + grid.address(l - 1, p1[fine1], i, q)
            if fine0.any():
                a[fine0] = grid.address(l - 1, r[fine0], i, q)
            if own.any():
                a[own] = 2 * nf + grid.address(l, r[own] // 2, i, q)
            src[:, j] = a
        vox.append(k)
        dirs.append(np.full(k.size, i))
        srcs.append(src)
    if not vox:
        return Coalesced(l, np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, len(corners)), np.int64))
    return Coalesced(l, np.concatenate(vox), np.concatenate(dirs), np.concatenate(srcs))


def _ghost_values(layer, parity, coarse, own0):
    if layer.coords.shape[0] == 0:
        return np.zeros((layer.src[0].shape[0], 0))
    return np.concatenate((coarse, own0))[layer.src[parity]]


def _mean_traces(co, fine0, fine1, own0):
    if co.src.shape[0] == 0:
        return np.zeros(0)
    vals = np.concatenate((fine0, fine1, own0))[co.src]
    acc = vals[:, 0].copy()
    for j in range(1, vals.shape[1]):
        acc += vals[:, j]
    return acc * (1.0 / vals.shape[1])


def explosion(grid, lattice, coarse_level, fine_level, coarse_state, fine_state0=None, parity=0):
    """Ghost populations of ``fine_level`` read from ``coarse_level``.

    Returns ``(coords, values)`` with coords (n, dim) at the fine resolution
    and values (q, n).  Parity 0 copies the coarse parent uniformly; parity
    1 needs the fine state at the start of the coarse step.
    """
    if coarse_level != fine_level + 1:
        raise StructureError("explosion links adjacent levels only")
    lat = _lattice_for(lattice)
    layer = _ghost_layer(grid, lat, fine_level)
    if parity == 1 and fine_state0 is None:
        raise StructureError("second sub-step ghosts need the fine state at the coarse step start")
    own0 = fine_state0 if fine_state0 is not None else np.zeros(grid.grids[fine_level].buffer_len(lat.q))
    return layer.coords, _ghost_values(layer, parity, coarse_state, own0)


def coalescence(grid, lattice, fine_level, coarse_level, fine_state0, fine_state1, coarse_state0):
    """Pulled values of coarse interface voxels assembled from the finer level.

    Returns ``(coords, direction, values)``: one entry per coarse voxel and
    direction whose traced sub-cell paths touch the finer level.
    """
    if coarse_level != fine_level + 1:
        raise StructureError("coalescence links adjacent levels only")
    for name, s in (("fine_state0", fine_state0), ("fine_state1", fine_state1), ("coarse_state0", coarse_state0)):
        if s is None:
            raise StructureError(f"missing {name}")
    lat = _lattice_for(lattice)
    co = _coalesced(grid, lat, coarse_level)
    g = grid.grids[coarse_level]
    coords = g.coords_of(g.slots()[co.voxel])
    return coords, co.direction, _mean_traces(co, fine_state0, fine_state1, coarse_state0)


def _lattice_for(lattice):
    return build_lattice(getattr(lattice, "kind", lattice))


# -- execution graph -------------------------------------------------------------------


class Operator(str, enum.Enum):
    Collide = "Collide"
    Stream = "Stream"
    FusedCollideStream = "FusedCollideStream"
    Explosion = "Explosion"
    Coalescence = "Coalescence"


@dataclass(frozen=True)
class Node:
    id: int
    level: int
    substep: int
    op: Operator
    group: str  # "Uniform", "Jump", "All" or "" for inter-level nodes
    blocks: int = 0

    @property
    def label(self):
        g = f"[{self.group}]" if self.group else ""
        return f"L{self.level}.{self.substep} {self.op.value}{g}"


@dataclass
class ExecutionGraph:
    fused: bool
    num_levels: int
    substeps: tuple
    signature: tuple
    nodes: list = field(default_factory=list)
    edges: set = field(default_factory=set)

    def add(self, level, substep, op, group="", blocks=0):
        n = Node(len(self.nodes), level, substep, Operator(op), group, blocks)
        self.nodes.append(n)
        return n

    def edge(self, a, b):
        if a is not None and b is not None:
            self.edges.add((a.id, b.id))

    def preds(self, node):
        return sorted(a for a, b in self.edges if b == node.id)

    def topological_order(self):
        """Kahn order, ties broken by node id; raises if a cycle exists."""
        indeg = [0] * len(self.nodes)
        succ = [[] for _ in self.nodes]
        for a, b in self.edges:
            indeg[b] += 1
            succ[a].append(b)
        ready = [i for i, d in enumerate(indeg) if d == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            i = heapq.heappop(ready)
            order.append(self.nodes[i])
            for j in succ[i]:
                indeg[j] -= 1
                if indeg[j] == 0:
                    heapq.heappush(ready, j)
        if len(order) != len(self.nodes):
            raise StructureError("execution graph has a cycle")
        return order

    def fused_nodes(self):
        return [n for n in self.nodes if n.op is Operator.FusedCollideStream]

    def fused_blocks(self):
        """Blocks covered by fused kernels in one sub-step of every level."""
        return sum(n.blocks for n in self.fused_nodes() if n.substep == 0)

    def validate(self):
        self.topological_order()
        by_id = {n.id: n for n in self.nodes}
        for n in self.nodes:
            if n.op is Operator.Stream and n.group in ("Jump", "All"):
                feeders = {by_id[p].op for p in self.preds(n)
                           if by_id[p].level == n.level and by_id[p].substep == n.substep}
                need = set()
                if n.level < self.num_levels - 1:
                    need.add(Operator.Explosion)
                if n.level > 0:
                    need.add(Operator.Coalescence)
                if not need <= feeders:
                    raise StructureError(f"{n.label} lacks its inter-level inputs")
            if self.fused and n.op is Operator.FusedCollideStream and n.group != "Uniform":
                raise StructureError(f"{n.label}: fused kernels only cover Uniform blocks")
        return True

    def to_dot(self):
        lines = ["digraph multires {", "  rankdir=LR;"]
        for n in self.nodes:
            lines.append(f'  n{n.id} [label="{n.label}"];')
        for a, b in sorted(self.edges):
            lines.append(f"  n{a} -> n{b};")
        lines.append("}")
        return "\n".join(lines) + "\n"

    def stats(self):
        counts = {}
        for n in self.nodes:
            counts[n.op.value] = counts.get(n.op.value, 0) + 1
        return {"fused": self.fused, "nodes": len(self.nodes), "edges": len(self.edges),
                "by_operator": counts, "fused_blocks": self.fused_blocks()}


def _signature(grid):
    return (grid.shape, grid.num_levels, tuple(g.num_blocks for g in grid.grids))


def build_execution_graph(grid, fused, classes=None):
    """Dependency graph of one coarsest-level step.

    ``fused=True``: Uniform blocks run one fused node per level sub-step,
    Jump blocks stage Stream -> Collide after the inter-level nodes.
    ``fused=False``: the finest level runs fused over all blocks and every
    coarser level stages Stream -> Collide over all blocks.
    """
    classes = classify_fusion(grid) if classes is None else classes
    L = grid.num_levels
    subs = tuple(2 ** (L - 1 - l) for l in range(L))
    G = ExecutionGraph(fused, L, subs, _signature(grid))
    has_ghost = [l < L - 1 and bool(_ghost_needed(grid, l)) for l in range(L)]
    has_coal = [l > 0 for l in range(L)]
    writers = {}
    inter = {}
    readers = {}
    for l in range(L):
        for s in range(subs[l]):
            w, r = [], []
            ex = G.add(l, s, Operator.Explosion) if has_ghost[l] else None
            co = G.add(l, s, Operator.Coalescence) if has_coal[l] else None
            inter[l, s] = (ex, co)
            nu = len(classes[l].uniform_blocks)
            nj = len(classes[l].jump_blocks)
            if fused:
                if nu:
                    fu = G.add(l, s, Operator.FusedCollideStream, "Uniform", nu)
                    w.append(fu)
                    r.append(fu)
                if nj:
                    st = G.add(l, s, Operator.Stream, "Jump", nj)
                    cl = G.add(l, s, Operator.Collide, "Jump", nj)
                    G.edge(ex, st)
                    G.edge(co, st)
                    G.edge(st, cl)
                    w.append(cl)
                    r.append(st)
            else:
                if l == 0:
                    fu = G.add(l, s, Operator.FusedCollideStream, "All", nu + nj)
                    G.edge(ex, fu)
                    G.edge(co, fu)
                    w.append(fu)
                    r.append(fu)
                else:
                    st = G.add(l, s, Operator.Stream, "All", nu + nj)
                    cl = G.add(l, s, Operator.Collide, "All", nu + nj)
                    G.edge(ex, st)
                    G.edge(co, st)
                    G.edge(st, cl)
                    w.append(cl)
                    r.append(st)
            writers[l, s] = w
            readers[l, s] = r
    # state (l, s) is produced by the writers of sub-step s-1
    def after(node, l, s):
        if s >= 1:
            for wn in writers[l, s - 1]:
                G.edge(wn, node)

    for l in range(L):
        for s in range(subs[l]):
            for rn in readers[l, s]:
                after(rn, l, s)
            ex, co = inter[l, s]
            if ex is not None:
                after(ex, l + 1, s // 2)
                after(ex, l, 2 * (s // 2))
            if co is not None:
                after(co, l - 1, 2 * s)
                after(co, l - 1, 2 * s + 1)
                after(co, l, s)
    G.validate()
    return G


def _ghost_needed(grid, l):
    return np.any(grid.jump_zero(l) & _box_dilate(grid.minlevel[l] > l))


# -- solver -----------------------------------------------------------------------------


class _LevelPlan:
    def __init__(self, grid, lat, l, lid_velocity, classes):
        self.level = l
        g = grid.grids[l]
        q = lat.q
        slots = g.slots()
        coords = g.coords_of(slots)
        n_buf = g.buffer_len(q)

        def addr(offset, comp):
            s = coords + offset
            lv = grid.level_at(l, s)
            out = np.full(len(s), -1, dtype=np.int64)
            same = lv == l
            out[same] = g.address(g.slot_of(s[same]), comp, q)
            out[(lv >= 0) & ~same] = 0  # replaced by inter-level entries below
            return out

        pt = build_pull_table(lat, coords, addr, grid.level_shapes[l], lid_velocity, n_buf)
        base = pt.n_ext
        self.ghost = _ghost_layer(grid, lat, l) if l < grid.num_levels - 1 else None
        n_ghost = 0 if self.ghost is None else self.ghost.coords.shape[0]
        if n_ghost:
            key = {tuple(c): k for k, c in enumerate(self.ghost.coords.tolist())}
            for i in range(q):
                s = coords - lat.velocities[i]
                k = np.flatnonzero(grid.level_at(l, s) > l)
                if k.size:
                    gi = np.array([key[tuple(c)] for c in s[k].tolist()], dtype=np.int64)
                    pt.table[i, k] = base + i * n_ghost + gi
        self.coal = _coalesced(grid, lat, l) if l > 0 else None
        if self.coal is not None and self.coal.voxel.size:
            pt.table[self.coal.direction, self.coal.voxel] = base + q * n_ghost + np.arange(self.coal.voxel.size)
        self.pull = pt
        # dense check that every cross-level pull was replaced
        for i in range(q):
            s = coords - lat.velocities[i]
            lv = grid.level_at(l, s)
            cross = (lv >= 0) & (lv != l)
            if np.any(pt.table[i, cross] < base):
                raise StructureError(f"level {l}: unresolved inter-level pull in direction {i}")
        B = g.block_size
        blk = slots // B
        cls = classes[l]
        uni = np.zeros(g.num_blocks, dtype=bool)
        uni[cls.uniform_blocks] = True
        self.groups = {
            "Uniform": np.flatnonzero(uni[blk]),
            "Jump": np.flatnonzero(~uni[blk]),
            "All": np.arange(slots.size),
        }
        self.dst = np.stack([g.address(slots, c, q) for c in range(q)])


class MultiResSolver:
    """Populations on every level of a :class:`MultiResGrid`."""

    def __init__(self, grid, lattice, tau, lid_velocity=None, states=None):
        self.grid = grid
        self.lattice = build_lattice(getattr(lattice, "kind", lattice))
        if self.lattice.dim != grid.dim:
            raise InputError("lattice and grid dimensions differ")
        self.taus = scaled_tau(tau, grid.num_levels)
        if not self.taus[-1] > 0.5:
            raise InputError("relaxation time too small for the coarsest level")
        self.omegas = [1.0 / t for t in self.taus]
        self.lid_velocity = None if lid_velocity is None else np.asarray(lid_velocity, dtype=np.float64)
        self.classes = classify_fusion(grid)
        self.plans = [_LevelPlan(grid, self.lattice, l, self.lid_velocity, self.classes)
                      for l in range(grid.num_levels)]
        q = self.lattice.q
        if states is None:
            states = []
            for g in grid.grids:
                buf = np.zeros(g.buffer_len(q))
                slots = g.slots()
                for c in range(q):
                    buf[g.address(slots, c, q)] = self.lattice.weights[c]
                states.append(buf)
        self.states = [np.array(s, dtype=np.float64) for s in states]
        self.time = 0

    def mass(self):
        """Total mass with per-level cell volumes (finest cell = 1)."""
        q = self.lattice.q
        terms = []
        for l, (g, buf) in enumerate(zip(self.grid.grids, self.states)):
            vol = float(2 ** (self.grid.dim * l))
            slots = g.slots()
            for c in range(q):
                terms.extend((buf[g.address(slots, c, q)] * vol).tolist())
        return math.fsum(terms)

    def field(self, level):
        """(q, n) populations of one level in canonical voxel order."""
        g = self.grid.grids[level]
        q = self.lattice.q
        slots = g.canonical_order()
        return np.stack([self.states[level][g.address(slots, c, q)] for c in range(q)])

    def step(self, graph):
        step_multires(self, graph)

    def run(self, steps, graph):
        for _ in range(steps):
            step_multires(self, graph)
            for buf in self.states:
                check_stable(buf, self.time)


def step_multires(solver, graph):
    """Advance every level by one coarsest-level step following ``graph``."""
    grid = solver.grid
    if graph.signature != _signature(grid):
        raise InputError("execution graph was built for a different grid")
    lat = solver.lattice
    e, w = lat.velocities, lat.weights
    L = grid.num_levels
    ver = {(l, 0): solver.states[l] for l in range(L)}
    ghosts, coals, pulled = {}, {}, {}

    def target(l, s):
        key = (l, s + 1)
        if key not in ver:
            ver[key] = ver[l, s].copy()
        return ver[key]

    def ext(l, s):
        plan = solver.plans[l]
        extra = []
        if plan.ghost is not None and plan.ghost.coords.shape[0]:
            extra.append(ghosts[l, s].ravel())
        if plan.coal is not None and plan.coal.voxel.size:
            extra.append(coals[l, s])
        return plan.pull.ext(ver[l, s], np.concatenate(extra) if extra else None)

    for node in graph.topological_order():
        l, s = node.level, node.substep
        plan = solver.plans[l]
        om = solver.omegas[l]
        if node.op is Operator.Explosion:
            ghosts[l, s] = _ghost_values(plan.ghost, s % 2, ver[l + 1, s // 2], ver[l, 2 * (s // 2)])
        elif node.op is Operator.Coalescence:
            coals[l, s] = _mean_traces(plan.coal, ver[l - 1, 2 * s], ver[l - 1, 2 * s + 1], ver[l, s])
        else:
            vox = plan.groups[node.group]
            if node.op is Operator.FusedCollideStream:
                out = kernels.gather_collide(ext(l, s), plan.pull.table[:, vox], e, w, om)
                target(l, s)[plan.dst[:, vox]] = out
            elif node.op is Operator.Stream:
                pulled[l, s, node.group] = kernels.gather(ext(l, s), plan.pull.table[:, vox])
            else:
                out = kernels.collide(pulled.pop((l, s, node.group)), e, w, om)
                target(l, s)[plan.dst[:, vox]] = out
    for l in range(L):
        solver.states[l] = ver[l, graph.substeps[l]]
    solver.time += 1
    return solver


# -- random structures -------------------------------------------------------------------


def random_level_map(rng, shape, levels, attempts=200):
    """Random nested-box level map satisfying the grading rules."""
    shape = tuple(shape)
    for _ in range(attempts):
        lm = np.full(shape, levels - 1, dtype=np.int64)
        lo = np.zeros(len(shape), dtype=np.int64)
        hi = np.array(shape, dtype=np.int64)
        ok = True
        for m in range(levels - 2, -1, -1):
            f = 2 ** (m + 1)
            margin = 2 * f
            a0, a1 = lo + margin, hi - margin
            if np.any(a1 - a0 < f):
                ok = False
                break
            b0 = np.array([rng.integers(a // f, (b - f) // f + 1) * f for a, b in zip(a0, a1)])
            b1 = np.array([rng.integers(s // f + 1, b // f + 1) * f for s, b in zip(b0, a1)])
            lm[tuple(slice(x, y) for x, y in zip(b0, b1))] = m
            lo, hi = b0, b1
        if not ok:
            continue
        try:
            MultiResGrid(lm)
        except StructureError:
            continue
        return lm
    raise StructureError(f"no valid {levels}-level map found for shape {shape}")


def centered_level_map(shape, levels):
    """Nested centred boxes: each finer level spans half the extent of the next coarser one."""
    shape = tuple(int(n) for n in shape)
    lm = np.full(shape, levels - 1, dtype=np.int64)
    for m in range(levels - 2, -1, -1):
        lo = [n // 2 - n // 2 ** (levels - m) for n in shape]
        hi = [n // 2 + n // 2 ** (levels - m) for n in shape]
        lm[tuple(slice(a, b) for a, b in zip(lo, hi))] = m
    return lm
