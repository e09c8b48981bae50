"""Latency/bandwidth cost model for halo updates.

A halo update is described by the number of separate transfers ``alpha``
and the number of elements moved ``beta``; its time on a link is
``alpha * t_setup + beta * elem_size / b_com``.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InputError
from .lattice import LatticeKind, build_lattice
from .layout import Scheme

__all__ = [
    "CommParams",
    "LinkModel",
    "crossing_count",
    "layout_params",
    "halo_update_time",
    "occ_iteration_time",
    "table_rows",
]


@dataclass(frozen=True)
class CommParams:
    alpha: int
    beta: int
    coalesced: bool

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise InputError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if (self.alpha == 0) != (self.beta == 0):
            raise InputError("alpha is zero exactly when beta is zero")


@dataclass(frozen=True)
class LinkModel:
    t_setup: float
    b_com: float

    def __post_init__(self):
        if self.t_setup < 0:
            raise InputError(f"t_setup must be >= 0, got {self.t_setup}")
        if not self.b_com > 0:
            raise InputError(f"b_com must be > 0, got {self.b_com}")


def crossing_count(kind, axis=-1):
    """Directions with a positive component along ``axis``."""
    lat = build_lattice(kind)
    return int(lat.crossing(axis % lat.dim, +1).size)


def layout_params(field, layout, s):
    """Per-step halo-update parameters of an interior partition.

    ``field`` is a lattice kind (or its name) for population fields, or an
    integer cardinality for a generic vector field under a five-point
    stencil, in which case ``s`` is the boundary row length d_x.
    """
    layout = Scheme(layout)
    if s < 1:
        raise InputError(f"cross-section must be >= 1, got {s}")
    if isinstance(field, (int,)) and not isinstance(field, bool):
        card = field
        if card < 1:
            raise InputError(f"cardinality must be >= 1, got {card}")
        if layout is Scheme.AoS:
            return CommParams(2, card * s, False)
        if layout is Scheme.SoA:
            return CommParams(2 * card, card * s, True)
        return CommParams(2, card * s, True)
    try:
        kind = LatticeKind(getattr(field, "kind", field))
    except ValueError:
        raise InputError(f"unknown lattice kind {field!r}") from None
    q = build_lattice(kind).q
    c = crossing_count(kind)
    if layout is Scheme.AoS:
        return CommParams(2, 2 * q * s, False)
    if layout is Scheme.SoA:
        return CommParams(2 * c, 2 * c * s, True)
    return CommParams(2, 2 * c * s, True)


def halo_update_time(params, elem_size, link):
    return params.alpha * link.t_setup + params.beta * elem_size / link.b_com


def occ_iteration_time(t_private, t_halo, t_shared):
    """Overlapped iteration: private work hides the halo update."""
    for name, v in (("t_private", t_private), ("t_halo", t_halo), ("t_shared", t_shared)):
        if v < 0:
            raise InputError(f"{name} must be >= 0, got {v}")
    return max(t_private, t_halo) + t_shared


def _fmt(coef, sym):
    return f"{coef}{sym}"


def table_rows(field, sym="s"):
    """(layout, alpha, beta-as-text, coalesced) rows for one field kind.

    Lattice rows print beta as a multiple of ``sym`` (the cross-section);
    generic fields print it as a multiple of ``d_x``.
    """
    rows = []
    for scheme in Scheme:
        p = layout_params(field, scheme, 1)
        rows.append((scheme.value, p.alpha, _fmt(p.beta, sym), p.coalesced))
    return rows
