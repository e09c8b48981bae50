"""Voxel-to-memory mappings for one partition slab plus its halos.

A partition owns ``shape`` voxels; along the partition axis it also carries
a one-voxel halo slab on each side, so local coordinates along that axis
run from -1 (lower halo) to ``t`` (upper halo), ``t`` being the owned
thickness.  Voxels are linearised with the partition axis slowest and the
remaining axes in natural order (x fastest), which makes every slab
perpendicular to the partition axis a contiguous range of local indices.

Three schemes map (voxel, component) pairs to addresses:

* ``AoS``: all components of a voxel are adjacent.
* ``SoA``: one array per component over all voxels.
* ``DisagSoA``: voxels are first grouped by their role in a halo update
  (halo, shared, interior), each group gets its own SoA region, and inside
  the shared and halo groups the components that cross the partition face
  come first so a whole face transfer is one contiguous range.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from .errors import InputError, ShapeError

__all__ = [
    "Scheme",
    "Group",
    "Span",
    "LayoutMap",
    "build_layout",
    "lattice_layout",
    "contiguous_spans",
    "split_runs",
]


class Scheme(str, enum.Enum):
    AoS = "AoS"
    SoA = "SoA"
    DisagSoA = "DisagSoA"


class Group(enum.IntEnum):
    """Voxel groups of a partition, in DisagSoA memory order."""

    UpperHalo = 0
    UpperShared = 1
    Interior = 2
    LowerShared = 3
    LowerHalo = 4


@dataclass(frozen=True, order=True)
class Span:
    base: int
    len: int

    def __post_init__(self):
        if self.len < 1:
            raise InputError(f"span length must be >= 1, got {self.len}")

    @property
    def end(self):
        return self.base + self.len


def split_runs(addresses):
    """Cut a sorted address array into maximal runs of consecutive values."""
    a = np.asarray(addresses, dtype=np.int64)
    if a.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(a) != 1) + 1
    starts = np.concatenate(([0], cuts))
    ends = np.concatenate((cuts, [a.size]))
    return [Span(int(a[s]), int(e - s)) for s, e in zip(starts, ends)]


class LayoutMap:
    """Address table for one partition under a given scheme.

    Built by :func:`build_layout`; immutable afterwards.  ``table[c, k]``
    is the address of component ``c`` of the voxel with local index ``k``.
    """

    def __init__(self, scheme, shape, cardinality, axis, up, down):
        self.scheme = Scheme(scheme)
        self.shape = tuple(int(s) for s in shape)
        self.dim = len(self.shape)
        self.cardinality = int(cardinality)
        self.axis = axis
        self.halo_depth = 1
        self.up = tuple(int(c) for c in up)
        self.down = tuple(int(c) for c in down)
        self.thickness = self.shape[axis]

        # fastest-varying axis first, partition axis last
        self.axis_order = [a for a in range(self.dim) if a != axis] + [axis]
        ext = list(self.shape)
        ext[axis] += 2
        self.ext_shape = tuple(ext)
        strides = [0] * self.dim
        s = 1
        for a in self.axis_order:
            strides[a] = s
            s *= ext[a]
        self.strides = np.array(strides, dtype=np.int64)
        self.n_local = s
        self.slab = s // ext[axis]

        t = self.thickness
        rows = {
            Group.UpperHalo: (t, t + 1),
            Group.UpperShared: (t - 1, t),
            Group.Interior: (1, t - 1),
            Group.LowerShared: (0, 1),
            Group.LowerHalo: (-1, 0),
        }
        # local index ranges (begin, end) of each group
        self.group_range = {g: ((r0 + 1) * self.slab, (r1 + 1) * self.slab) for g, r0, r1 in
                            ((g, *rows[g]) for g in Group)}

        canonical = tuple(range(self.cardinality))
        self.component_order = {}
        for g in Group:
            if self.scheme is Scheme.DisagSoA and g in (Group.UpperShared, Group.LowerHalo):
                first = self.up
            elif self.scheme is Scheme.DisagSoA and g in (Group.LowerShared, Group.UpperHalo):
                first = self.down
            else:
                first = ()
            self.component_order[g] = tuple(first) + tuple(c for c in canonical if c not in first)

        self.group_offsets = {}
        table = np.empty((self.cardinality, self.n_local), dtype=np.int64)
        k = np.arange(self.n_local, dtype=np.int64)
        if self.scheme is Scheme.AoS:
            for c in canonical:
                table[c] = self.cardinality * k + c
            for g in Group:
                self.group_offsets[g] = self.group_range[g][0] * self.cardinality
        elif self.scheme is Scheme.SoA:
            for c in canonical:
                table[c] = c * self.n_local + k
            for g in Group:
                self.group_offsets[g] = self.group_range[g][0]
        else:
            base = 0
            for g in Group:
                b, e = self.group_range[g]
                n_g = e - b
                self.group_offsets[g] = base
                for rank, c in enumerate(self.component_order[g]):
                    table[c, b:e] = base + rank * n_g + np.arange(n_g)
                base += n_g * self.cardinality
        table.setflags(write=False)
        self.table = table
        self.total_len = self.n_local * self.cardinality

    # -- indexing -----------------------------------------------------------

    def local_index(self, voxels):
        """Local linear index of voxel coordinates (..., dim); halo rows allowed."""
        v = np.asarray(voxels, dtype=np.int64)
        shifted = v.copy()
        shifted[..., self.axis] += 1
        lo = np.zeros(self.dim, dtype=np.int64)
        hi = np.array(self.ext_shape, dtype=np.int64)
        if np.any(shifted < lo) or np.any(shifted >= hi):
            raise IndexError(f"voxel outside partition+halo bounds: {v.tolist()}")
        return shifted @ self.strides

    def coords(self, local):
        """Inverse of :meth:`local_index`."""
        k = np.asarray(local, dtype=np.int64)
        out = np.empty(k.shape + (self.dim,), dtype=np.int64)
        for a in self.axis_order:
            out[..., a] = k % self.ext_shape[a]
            k = k // self.ext_shape[a]
        out[..., self.axis] -= 1
        return out

    def address(self, voxel, component):
        if not 0 <= component < self.cardinality:
            raise IndexError(f"component {component} outside [0, {self.cardinality})")
        return int(self.table[component, self.local_index(voxel)])

    def addresses(self, voxels, component):
        """Vectorised :meth:`address` over an (n, dim) coordinate array."""
        if not 0 <= component < self.cardinality:
            raise IndexError(f"component {component} outside [0, {self.cardinality})")
        return self.table[component, self.local_index(voxels)]

    def group_of(self, voxel):
        k = int(self.local_index(voxel))
        for g, (b, e) in self.group_range.items():
            if b <= k < e:
                return g
        raise AssertionError("group ranges do not cover the local index space")

    def group_locals(self, group):
        b, e = self.group_range[Group(group)]
        return np.arange(b, e, dtype=np.int64)

    def owned_locals(self):
        return np.arange(self.slab, self.n_local - self.slab, dtype=np.int64)

    # -- data movement ------------------------------------------------------

    def scatter(self, field):
        """Buffer holding ``field`` (cardinality, n_local) in this layout."""
        buf = np.empty(self.total_len)
        buf[self.table] = field
        return buf

    def gather(self, buffer):
        """(cardinality, n_local) view of a buffer in canonical order."""
        return np.asarray(buffer)[self.table]

    def coalesced(self):
        """True when, inside every group, each component is consecutive over voxels."""
        for g in Group:
            b, e = self.group_range[g]
            if e - b < 2:
                continue
            if np.any(np.diff(self.table[:, b:e], axis=1) != 1):
                return False
        return True

    def to_dict(self):
        return {
            "scheme": self.scheme.value,
            "shape": list(self.shape),
            "cardinality": self.cardinality,
            "axis": self.axis,
            "halo_depth": self.halo_depth,
            "total_len": self.total_len,
            "groups": [
                {
                    "group": g.name,
                    "offset": int(self.group_offsets[g]),
                    "voxels": int(self.group_range[g][1] - self.group_range[g][0]),
                    "component_order": list(self.component_order[g]),
                }
                for g in Group
            ],
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def __repr__(self):
        return f"LayoutMap({self.scheme.value}, shape={self.shape}, cardinality={self.cardinality})"


def build_layout(scheme, shape, cardinality, partition_axis=-1, *, up=None, down=None):
    """Build a layout for an owned slab of extents ``shape``.

    ``up`` / ``down`` are the components that cross the upper / lower face of
    the slab; they default to all components (generic stencil fields).
    """
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    if cardinality < 1:
        raise InputError(f"cardinality must be >= 1, got {cardinality}")
    axis = partition_axis % len(shape)
    if shape[axis] < 2:
        raise ShapeError(f"extent {shape[axis]} along partition axis must be >= 2")
    all_c = tuple(range(cardinality))
    up = all_c if up is None else tuple(up)
    down = all_c if down is None else tuple(down)
    for c in up + down:
        if not 0 <= c < cardinality:
            raise InputError(f"crossing component {c} outside [0, {cardinality})")
    return LayoutMap(scheme, shape, cardinality, axis, up, down)


def lattice_layout(scheme, shape, lattice, partition_axis=-1):
    """Layout for lattice populations; crossing sets follow the velocity signs."""
    axis = partition_axis % len(shape)
    return build_layout(
        scheme,
        shape,
        lattice.q,
        axis,
        up=lattice.crossing(axis, +1),
        down=lattice.crossing(axis, -1),
    )


def contiguous_spans(layout, group, components):
    """Minimal sorted list of spans covering (group voxels x components)."""
    comps = list(components)
    if not comps:
        raise InputError("component subset must be non-empty")
    locs = layout.group_locals(group)
    if locs.size == 0:
        return []
    addr = np.sort(layout.table[comps][:, locs].ravel())
    return split_runs(addr)
