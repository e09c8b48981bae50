"""Deterministic simulation of a 1D multi-device decomposition.

Each partition owns a slab of the domain in its own buffer (laid out by a
:class:`~disagg.layout.LayoutMap`) plus one halo slab per side.  Halo
updates copy contiguous spans between buffers and log every copy in a
:class:`TransferLedger`.  :func:`step_occ` runs one step in the overlapped
order: private voxels, halo update on the old buffers, shared voxels, swap.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, ContractViolation, DecompositionError, InputError
from .layout import Group, Scheme, Span, build_layout
from .lbm import grid_coords, linear_index

__all__ = [
    "Decomposition",
    "VoxelClass",
    "TransferRecord",
    "TransferLedger",
    "PartitionedField",
    "Neighborhood",
    "IdentityKernel",
    "FivePointKernel",
    "decompose",
    "classify_voxels",
    "halo_update",
    "step_occ",
    "check_trace",
]

LOWER, UPPER = 0, 1


@dataclass(frozen=True)
class Decomposition:
    domain_shape: tuple
    num_partitions: int
    axis: int
    slabs: tuple
    periodic: bool = False

    def thickness(self, p):
        b, e = self.slabs[p]
        return e - b

    def neighbors(self, p):
        """(lower, upper) neighbour indices, ``None`` at a non-periodic domain end."""
        n = self.num_partitions
        lower = p - 1 if p > 0 else (n - 1 if self.periodic else None)
        upper = p + 1 if p < n - 1 else (0 if self.periodic else None)
        return lower, upper

    def local_shape(self, p):
        s = list(self.domain_shape)
        s[self.axis] = self.thickness(p)
        return tuple(s)


def decompose(domain_shape, num_partitions, axis=-1, periodic=False):
    shape = tuple(int(s) for s in domain_shape)
    axis = axis % len(shape)
    if num_partitions < 1:
        raise DecompositionError(f"need at least one partition, got {num_partitions}")
    n = shape[axis]
    if n < 2 * num_partitions:
        raise DecompositionError(
            f"axis extent {n} cannot host {num_partitions} slabs of thickness >= 2"
        )
    base, extra = divmod(n, num_partitions)
    slabs, b = [], 0
    for p in range(num_partitions):
        t = base + (1 if p < extra else 0)
        slabs.append((b, b + t))
        b += t
    return Decomposition(shape, num_partitions, axis, tuple(slabs), periodic)


class VoxelClass(enum.IntEnum):
    Private = 0
    Shared = 1


def classify_voxels(decomp, partition):
    """Per-voxel class over the owned slab, canonical order (x fastest)."""
    if not 0 <= partition < decomp.num_partitions:
        raise InputError(f"partition {partition} out of range")
    shape = decomp.local_shape(partition)
    lower, upper = decomp.neighbors(partition)
    t = shape[decomp.axis]
    a = grid_coords(shape)[:, decomp.axis]
    shared = np.zeros(a.size, dtype=bool)
    if lower is not None:
        shared |= a == 0
    if upper is not None:
        shared |= a == t - 1
    return np.where(shared, VoxelClass.Shared, VoxelClass.Private).astype(np.int8)


@dataclass(frozen=True)
class TransferRecord:
    step: int
    src: int
    dst: int
    src_span: Span
    dst_span: Span

    def __post_init__(self):
        if self.src_span.len != self.dst_span.len:
            raise ConsistencyError("source and destination spans differ in length")

    @property
    def elements(self):
        return self.src_span.len


class TransferLedger:
    """Append-only log of halo-update copies."""

    def __init__(self):
        self._records = []

    @property
    def records(self):
        return tuple(self._records)

    def append(self, record):
        if self._records:
            last = self._records[-1]
            if record.step < last.step:
                raise ConsistencyError("ledger records must be appended in step order")
        self._records.append(record)

    def __len__(self):
        return len(self._records)

    def steps(self):
        return sorted({r.step for r in self._records})

    def params(self, step, partition=None):
        """(alpha, beta) of one step, optionally only records sent by ``partition``."""
        recs = [r for r in self._records if r.step == step and (partition is None or r.src == partition)]
        return len(recs), sum(r.elements for r in recs)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "src", "dst", "base_src", "base_dst", "elements"])
        for r in self._records:
            w.writerow([r.step, r.src, r.dst, r.src_span.base, r.dst_span.base, r.elements])
        return buf.getvalue()


class Partition:
    def __init__(self, index, slab, layout, lower, upper):
        self.index = index
        self.slab = slab
        self.layout = layout
        self.lower = lower
        self.upper = upper
        self.buffer = np.zeros(layout.total_len)


class PartitionedField:
    """Per-partition buffers of one global field.

    ``field`` is either a lattice (populations, crossing sets from the
    velocities) or an integer cardinality (generic stencil field; every
    component crosses).  AoS layouts always transfer whole voxels.
    """

    def __init__(self, decomp, scheme, field, values=None, periodic_axes=None):
        self.decomp = decomp
        if periodic_axes is None:
            periodic_axes = tuple(d == decomp.axis and decomp.periodic for d in range(len(decomp.domain_shape)))
        periodic_axes = tuple(bool(v) for v in periodic_axes)
        if periodic_axes[decomp.axis] != decomp.periodic:
            raise InputError("periodicity along the partition axis is set by the decomposition")
        self.periodic_axes = periodic_axes
        self.time = 0
        self.scheme = Scheme(scheme)
        self.lattice = None if isinstance(field, int) else field
        self.cardinality = field if isinstance(field, int) else field.q
        ax = decomp.axis
        self.parts = []
        for p in range(decomp.num_partitions):
            shape = decomp.local_shape(p)
            if self.lattice is not None:
                up = self.lattice.crossing(ax, +1)
                down = self.lattice.crossing(ax, -1)
            else:
                up = down = None
            layout = build_layout(self.scheme, shape, self.cardinality, ax, up=up, down=down)
            lower, upper = decomp.neighbors(p)
            self.parts.append(Partition(p, decomp.slabs[p], layout, lower, upper))
        self._plan = None
        self._kernel_cache = {}
        if values is not None:
            self.load(values)

    # -- global <-> local ---------------------------------------------------------

    def _global_index(self, part):
        lay = part.layout
        locs = lay.owned_locals()
        coords = lay.coords(locs)
        coords[:, self.decomp.axis] += part.slab[0]
        return locs, linear_index(coords, self.decomp.domain_shape)

    def load(self, values):
        """Scatter a global (cardinality, N) canonical field into the partitions."""
        v = np.asarray(values, dtype=np.float64)
        n = int(np.prod(self.decomp.domain_shape))
        if v.shape != (self.cardinality, n):
            raise InputError(f"expected field of shape {(self.cardinality, n)}, got {v.shape}")
        for part in self.parts:
            locs, gidx = self._global_index(part)
            part.buffer[part.layout.table[:, locs]] = v[:, gidx]

    def gather(self):
        """Global (cardinality, N) canonical field from the owned voxels."""
        n = int(np.prod(self.decomp.domain_shape))
        out = np.empty((self.cardinality, n))
        for part in self.parts:
            locs, gidx = self._global_index(part)
            out[:, gidx] = part.buffer[part.layout.table[:, locs]]
        return out

    # -- halo transfer plan ---------------------------------------------------------

    def transfer_components(self, direction):
        if self.lattice is None or self.scheme is Scheme.AoS:
            return tuple(range(self.cardinality))
        sign = +1 if direction == UPPER else -1
        return tuple(int(c) for c in self.lattice.crossing(self.decomp.axis, sign))

    def check_links(self):
        for part in self.parts:
            if part.upper is not None and self.parts[part.upper].lower != part.index:
                raise ConsistencyError(f"partition {part.index} upper link is not mirrored")
            if part.lower is not None and self.parts[part.lower].upper != part.index:
                raise ConsistencyError(f"partition {part.index} lower link is not mirrored")

    def transfer_plan(self):
        """Per step: list of (src, dst, direction, [(src_span, dst_span), ...])."""
        if self._plan is None:
            self.check_links()
            plan = []
            for part in self.parts:
                for direction, nbr in ((LOWER, part.lower), (UPPER, part.upper)):
                    if nbr is None:
                        continue
                    dst = self.parts[nbr]
                    comps = list(self.transfer_components(direction))
                    src_group = Group.UpperShared if direction == UPPER else Group.LowerShared
                    dst_group = Group.LowerHalo if direction == UPPER else Group.UpperHalo
                    s = part.layout.table[comps][:, part.layout.group_locals(src_group)].ravel()
                    d = dst.layout.table[comps][:, dst.layout.group_locals(dst_group)].ravel()
                    order = np.argsort(s, kind="stable")
                    s, d = s[order], d[order]
                    cuts = np.flatnonzero((np.diff(s) != 1) | (np.diff(d) != 1)) + 1
                    starts = np.concatenate(([0], cuts))
                    ends = np.concatenate((cuts, [s.size]))
                    spans = [(Span(int(s[a]), int(b - a)), Span(int(d[a]), int(b - a)))
                             for a, b in zip(starts, ends)]
                    plan.append((part.index, nbr, direction, spans))
            self._plan = plan
        return self._plan


def halo_update(field, ledger, step):
    """Copy shared slabs into neighbour halos; one ledger record per span."""
    events = []
    for src, dst, direction, spans in field.transfer_plan():
        sb = field.parts[src].buffer
        db = field.parts[dst].buffer
        if field.parts[dst].lower != src and field.parts[dst].upper != src:
            raise ConsistencyError(f"partition {dst} does not list {src} as a neighbour")
        for ss, ds in spans:
            db[ds.base:ds.end] = sb[ss.base:ss.end]
            ledger.append(TransferRecord(step, src, dst, ss, ds))
        events.append((src, dst, direction, len(spans)))
    return events


# -- kernels ------------------------------------------------------------------------


class Neighborhood:
    """Addressing view over a set of owned voxels of one partition.

    ``address(offset, comp)`` gives the buffer address of ``comp`` at each
    voxel shifted by ``offset``: halo rows stand in for neighbour slabs,
    periodic axes wrap, and positions outside a non-periodic domain give -1.
    """

    def __init__(self, field, part, locals_, debug=False):
        self.field = field
        self.part = part
        self.layout = part.layout
        self.locals = np.asarray(locals_, dtype=np.int64)
        self.voxels = self.layout.coords(self.locals)
        self.global_coords = self.voxels.copy()
        self.global_coords[:, field.decomp.axis] += part.slab[0]
        self.domain_shape = field.decomp.domain_shape
        self.buffer_len = self.layout.total_len
        self.debug = debug
        self.periodic = field.periodic_axes

    def address(self, offset, comp):
        off = np.asarray(offset, dtype=np.int64)
        if self.debug and np.abs(off).max(initial=0) > 1:
            raise ContractViolation(f"kernel read at offset {off.tolist()} exceeds radius 1")
        ax = self.field.decomp.axis
        tgt = self.voxels + off
        ok = np.ones(tgt.shape[0], dtype=bool)
        for d, n in enumerate(self.layout.shape):
            if d == ax:
                continue
            if self.periodic[d]:
                tgt[:, d] %= n
            else:
                ok &= (tgt[:, d] >= 0) & (tgt[:, d] < n)
        t = self.layout.thickness
        if self.part.lower is None:
            ok &= tgt[:, ax] >= 0
        if self.part.upper is None:
            ok &= tgt[:, ax] < t
        safe = np.where(ok[:, None], tgt, self.voxels)
        return np.where(ok, self.layout.addresses(safe, comp), -1)


class IdentityKernel:
    radius = 0

    def __init__(self, cardinality):
        self.cardinality = cardinality

    def prepare(self, nbhd):
        own = np.stack([nbhd.address(np.zeros(nbhd.voxels.shape[1], dtype=np.int64), c)
                        for c in range(self.cardinality)])

        def run(buffer):
            return buffer[own]

        return run


class FivePointKernel:
    """Mean of the 2*dim axis neighbours, reading zero outside the domain."""

    radius = 1

    def __init__(self, cardinality):
        self.cardinality = cardinality

    def prepare(self, nbhd):
        dim = nbhd.voxels.shape[1]
        offsets = []
        for d in range(dim):
            for s in (-1, 1):
                o = np.zeros(dim, dtype=np.int64)
                o[d] = s
                offsets.append(o)
        tables = [np.stack([nbhd.address(o, c) for o in offsets]) for c in range(self.cardinality)]
        scale = 1.0 / len(offsets)

        def run(buffer):
            out = np.empty((self.cardinality, nbhd.locals.size))
            for c, tab in enumerate(tables):
                acc = np.zeros(nbhd.locals.size)
                for row in tab:
                    acc += np.where(row >= 0, buffer[np.maximum(row, 0)], 0.0)
                out[c] = acc * scale
            return out

        return run


def _prepared(field, kernel, debug):
    key = (id(kernel), debug)
    hit = field._kernel_cache.get(key)
    if hit is not None and hit[0] is kernel:
        return hit[1]
    prepared = []
    for part in field.parts:
        classes = classify_voxels(field.decomp, part.index)
        owned = part.layout.owned_locals()
        priv = owned[classes == VoxelClass.Private]
        shared = owned[classes == VoxelClass.Shared]
        entry = []
        for locs in (priv, shared):
            if locs.size:
                nb = Neighborhood(field, part, locs, debug)
                entry.append((part.layout.table[:, locs], kernel.prepare(nb)))
            else:
                entry.append(None)
        prepared.append(entry)
    field._kernel_cache[key] = (kernel, prepared)
    return prepared


def step_occ(field, kernel, ledger, step=None, trace=None, debug=False):
    """One overlapped step; appends ordering events to ``trace`` if given."""
    if kernel.cardinality != field.cardinality:
        raise InputError("kernel and field cardinalities differ")
    step = field.time if step is None else step
    prepared = _prepared(field, kernel, debug)
    new = [part.buffer.copy() for part in field.parts]
    ev = _Trace(trace, step)
    private_ids = []
    for part, (priv, _) in zip(field.parts, prepared):
        if priv is not None:
            dst, run = priv
            new[part.index][dst] = run(part.buffer)
        private_ids.append(ev.add("private", part.index))
    halo_ids = {}
    for src, dst, direction, n in halo_update(field, ledger, step):
        halo_ids.setdefault(dst, []).append(
            ev.add("halo", src, dst=dst, direction=direction, records=n)
        )
    shared_ids = []
    for part, (_, shared) in zip(field.parts, prepared):
        if shared is not None:
            dst, run = shared
            new[part.index][dst] = run(part.buffer)
        shared_ids.append(ev.add("shared", part.index, deps=halo_ids.get(part.index, [])))
    for part, buf in zip(field.parts, new):
        part.buffer = buf
    ev.add("swap", None, deps=private_ids + shared_ids)
    field.time = step + 1
    return field


class _Trace:
    def __init__(self, sink, step):
        self.sink = sink
        self.step = step

    def add(self, kind, partition, deps=(), **extra):
        if self.sink is None:
            return None
        eid = len(self.sink)
        self.sink.append({"id": eid, "step": self.step, "kind": kind, "partition": partition,
                          "deps": [d for d in deps if d is not None], **extra})
        return eid


def check_trace(trace):
    """Verify dependency order: every event follows its deps, and each shared
    computation depends on every halo copy into its partition that step."""
    seen = set()
    for ev in trace:
        for d in ev["deps"]:
            if d not in seen:
                raise ConsistencyError(f"event {ev['id']} ({ev['kind']}) precedes its dependency {d}")
        seen.add(ev["id"])
    by_id = {ev["id"]: ev for ev in trace}
    for ev in trace:
        if ev["kind"] != "shared":
            continue
        feeding = {e["id"] for e in trace
                   if e["kind"] == "halo" and e["step"] == ev["step"] and e["dst"] == ev["partition"]}
        if not feeding <= set(ev["deps"]):
            raise ConsistencyError(f"shared computation {ev['id']} does not wait for its halo update")
        for d in ev["deps"]:
            if by_id[d]["step"] != ev["step"]:
                raise ConsistencyError("shared computation depends on another step's halo")
    return True


def trace_json(trace):
    return json.dumps(trace, indent=1)
