"""Field dumps and diagnostics files.

A field dump is two files: ``<stem>.bin`` holds little-endian doubles in
canonical order (component slowest, then voxels x fastest) and
``<stem>.json`` describes it.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import InputError

__all__ = ["write_field", "read_field", "write_diagnostics", "read_diagnostics", "write_json"]

DIAGNOSTIC_COLUMNS = ("step", "mass", "max_u")


def write_field(stem, f, header):
    """Write (q, n) populations and a JSON header next to each other."""
    stem = Path(stem)
    a = np.ascontiguousarray(f, dtype="<f8")
    meta = dict(header)
    meta.update({"dtype": "<f8", "components": int(a.shape[0]), "voxels": int(a.shape[1]), "order": "component, x fastest"})
    stem.with_suffix(".bin").write_bytes(a.tobytes())
    write_json(stem.with_suffix(".json"), meta)
    return stem.with_suffix(".bin"), stem.with_suffix(".json")


def read_field(stem):
    stem = Path(stem)
    meta = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
    raw = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype=meta["dtype"])
    if raw.size != meta["components"] * meta["voxels"]:
        raise InputError(f"{stem}.bin holds {raw.size} values, header promises "
                         f"{meta['components']} x {meta['voxels']}")
    return raw.reshape(meta["components"], meta["voxels"]).astype(np.float64), meta


def write_diagnostics(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DIAGNOSTIC_COLUMNS)
        for r in rows:
            w.writerow([r["step"], repr(float(r["mass"])), repr(float(r["max_u"]))])


def read_diagnostics(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [{"step": int(r["step"]), "mass": float(r["mass"]), "max_u": float(r["max_u"])}
                for r in csv.DictReader(fh)]


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
