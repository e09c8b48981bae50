"""Backend selection for the hot per-voxel kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback is used.  ``DISAGG_BACKEND=python`` forces the fallback.  Both
backends produce bitwise-identical results.
"""

import contextlib
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def available():
    return sorted(_BACKENDS)


def _initial():
    forced = os.environ.get("DISAGG_BACKEND", "").strip().lower()
    if forced:
        if forced not in _BACKENDS:
            raise ImportError(f"DISAGG_BACKEND={forced!r} is not available (have {available()})")
        return _BACKENDS[forced]
    return _ckernels if _ckernels is not None else _pykernels


_impl = _initial()


def backend():
    return _impl.NAME


@contextlib.contextmanager
def use_backend(name):
    """Temporarily switch backend, e.g. for parity tests and benchmarks."""
    global _impl
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r} (have {available()})")
    prev = _impl
    _impl = _BACKENDS[name]
    try:
        yield _impl
    finally:
        _impl = prev


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def moments(f, e):
    """Density (n,) and velocity (dim, n) of populations f (q, n)."""
    return _impl.moments(_f64(f), _i64(e))


def equilibrium(rho, u, e, w):
    """Equilibrium (q, n) for density (n,) and velocity (dim, n)."""
    return _impl.equilibrium(_f64(rho), _f64(u), _i64(e), _f64(w))


def collide(f, e, w, omega):
    """BGK relaxation ``(1 - omega) f + omega feq`` of f (q, n)."""
    return _impl.collide(_f64(f), _i64(e), _f64(w), float(omega))


def gather(src, table):
    """``src[table]`` for a flat source buffer and a (q, n) index table."""
    return _impl.gather(_f64(src), _i64(table))


def gather_collide(src, table, e, w, omega):
    """Fused pull and collide: ``collide(src[table])`` in one traversal."""
    return _impl.gather_collide(_f64(src), _i64(table), _i64(e), _f64(w), float(omega))
