"""Solver configuration: a YAML document validated into a :class:`SolverConfig`.

Example::

    scenario: LidDrivenCavity
    lattice: D3Q19
    shape: [32, 32, 32]
    tau: 0.56
    velocity: [0.05, 0.0, 0.0]
    steps: 2000
    engine: partitioned
    layout: DisagSoA
    partitions: 4

Keys
    scenario           LidDrivenCavity | FlowOverObstacle | PeriodicBox
    lattice            D2Q9 | D3Q19 | D3Q27
    shape              box extents, one per lattice dimension
    tau                relaxation time (> 0.5) at the finest resolution
    velocity           lid velocity, inflow velocity, or mean flow of the periodic box
    steps              time steps (coarsest-level steps for multires)
    engine             dense | partitioned | sparse | multires
    fused              dense: single-traversal kernel; multires: fused graph
    layout             AoS | SoA | DisagSoA (partitioned engine)
    partitions         slabs along the last axis (partitioned engine)
    strategy           Naive | DisagBitmask | DisagMem (sparse engine)
    block_edge         voxels per block edge (sparse and multires engines)
    levels             resolution levels (multires engine)
    obstacle           {lo: [...], hi: [...]} solid box (FlowOverObstacle)
    perturbation       relative random perturbation of the initial state
    seed               RNG seed for the perturbation
    diagnostics_every  steps between diagnostics rows
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import yaml

from .errors import SchemaError

__all__ = ["SolverConfig", "SCENARIOS", "ENGINES", "validate", "load_config", "parse_config"]

SCENARIOS = ("LidDrivenCavity", "FlowOverObstacle", "PeriodicBox")
ENGINES = ("dense", "partitioned", "sparse", "multires")
LATTICES = {"D2Q9": 2, "D3Q19": 3, "D3Q27": 3}
LAYOUTS = ("AoS", "SoA", "DisagSoA")
STRATEGIES = ("Naive", "DisagBitmask", "DisagMem")
MAX_SPEED = 0.1

# engines able to run each scenario
SUPPORTED = {
    "LidDrivenCavity": {"dense", "partitioned", "multires"},
    "FlowOverObstacle": {"dense", "sparse"},
    "PeriodicBox": {"dense", "partitioned"},
}


@dataclass(frozen=True)
class SolverConfig:
    scenario: str
    lattice: str = "D3Q19"
    shape: tuple = (32, 32, 32)
    tau: float = 0.56
    velocity: tuple = (0.05, 0.0, 0.0)
    steps: int = 100
    engine: str = "dense"
    fused: bool = False
    layout: str = "DisagSoA"
    partitions: int = 1
    strategy: str = "DisagMem"
    block_edge: int = 4
    levels: int = 2
    obstacle: dict | None = None
    perturbation: float = 0.0
    seed: int = 0
    diagnostics_every: int = 10
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def dim(self):
        return LATTICES[self.lattice]

    def to_dict(self):
        d = asdict(self)
        d.pop("extra")
        d["shape"] = list(self.shape)
        d["velocity"] = list(self.velocity)
        return d


_FIELDS = {f for f in SolverConfig.__dataclass_fields__ if f != "extra"}


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(doc):
    """Check a parsed document; returns a list of human-readable problems."""
    errs = []
    if not isinstance(doc, dict):
        return ["configuration must be a mapping of keys to values"]
    for k in sorted(set(doc) - _FIELDS):
        errs.append(f"unknown key '{k}'")
    d = {**{k: v.default for k, v in SolverConfig.__dataclass_fields__.items() if k != "extra"}, **doc}

    if "scenario" not in doc:
        errs.append("missing required key 'scenario'")
    elif d["scenario"] not in SCENARIOS:
        errs.append(f"scenario must be one of {', '.join(SCENARIOS)}; got {d['scenario']!r}")
    lat_ok = d["lattice"] in LATTICES
    if not lat_ok:
        errs.append(f"lattice must be one of {', '.join(LATTICES)}; got {d['lattice']!r}")
    dim = LATTICES.get(d["lattice"])

    shape = d["shape"]
    if not (isinstance(shape, (list, tuple)) and all(_is_int(s) for s in shape)):
        errs.append("shape must be a list of integers")
        shape = None
    else:
        if any(s < 1 for s in shape):
            errs.append("shape extents must be >= 1")
        if lat_ok and len(shape) != dim:
            errs.append(f"shape has {len(shape)} extents but {d['lattice']} is {dim}D")

    if not _is_num(d["tau"]) or not d["tau"] > 0.5:
        errs.append(f"tau must be a number > 0.5; got {d['tau']!r}")
    vel = d["velocity"]
    if not (isinstance(vel, (list, tuple)) and all(_is_num(v) for v in vel)):
        errs.append("velocity must be a list of numbers")
    else:
        if lat_ok and len(vel) != dim:
            errs.append(f"velocity has {len(vel)} components but {d['lattice']} is {dim}D")
        if float(np.sqrt(sum(float(v) ** 2 for v in vel))) > MAX_SPEED:
            errs.append(f"|velocity| must be <= {MAX_SPEED} (low-Mach stability envelope)")
    for key, lo in (("steps", 0), ("partitions", 1), ("block_edge", 1), ("levels", 1),
                    ("seed", 0), ("diagnostics_every", 1)):
        if not _is_int(d[key]) or d[key] < lo:
            errs.append(f"{key} must be an integer >= {lo}; got {d[key]!r}")
    if not isinstance(d["fused"], bool):
        errs.append(f"fused must be true or false; got {d['fused']!r}")
    if not _is_num(d["perturbation"]) or not 0 <= d["perturbation"] < 1:
        errs.append(f"perturbation must be a number in [0, 1); got {d['perturbation']!r}")
    if d["engine"] not in ENGINES:
        errs.append(f"engine must be one of {', '.join(ENGINES)}; got {d['engine']!r}")
    if d["layout"] not in LAYOUTS:
        errs.append(f"layout must be one of {', '.join(LAYOUTS)}; got {d['layout']!r}")
    if d["strategy"] not in STRATEGIES:
        errs.append(f"strategy must be one of {', '.join(STRATEGIES)}; got {d['strategy']!r}")

    scen, eng = d["scenario"], d["engine"]
    if scen in SUPPORTED and eng in ENGINES and eng not in SUPPORTED[scen]:
        errs.append(f"engine '{eng}' cannot run {scen} (supported: {', '.join(sorted(SUPPORTED[scen]))})")
    if eng == "partitioned" and shape and _is_int(d["partitions"]) and shape[-1] < 2 * d["partitions"]:
        errs.append(f"last extent {shape[-1]} cannot host {d['partitions']} slabs of thickness >= 2")
    if eng == "multires" and _is_int(d["levels"]) and not 1 <= d["levels"] <= 4:
        errs.append("levels must be between 1 and 4")

    obs = d["obstacle"]
    if obs is not None:
        if not (isinstance(obs, dict) and set(obs) == {"lo", "hi"}):
            errs.append("obstacle must be a mapping with keys 'lo' and 'hi'")
        elif shape and not all(isinstance(obs[k], (list, tuple)) and len(obs[k]) == len(shape)
                               and all(_is_int(v) for v in obs[k]) for k in ("lo", "hi")):
            errs.append("obstacle lo/hi must be integer lists with one entry per axis")
        elif shape:
            for a, (lo, hi, n) in enumerate(zip(obs["lo"], obs["hi"], shape)):
                if not 1 <= lo < hi <= n - 1:
                    errs.append(f"obstacle extent on axis {a} must satisfy 1 <= lo < hi <= {n - 1}")
        if scen != "FlowOverObstacle":
            errs.append("obstacle is only meaningful for FlowOverObstacle")
    return errs


def parse_config(doc):
    """Validated :class:`SolverConfig` from a mapping; raises :class:`SchemaError`."""
    errs = validate(doc)
    if errs:
        raise SchemaError(errs)
    d = dict(doc)
    d["shape"] = tuple(int(s) for s in d.get("shape", SolverConfig.shape))
    d["velocity"] = tuple(float(v) for v in d.get("velocity", SolverConfig.velocity))
    if "tau" in d:
        d["tau"] = float(d["tau"])
    if "perturbation" in d:
        d["perturbation"] = float(d["perturbation"])
    return SolverConfig(**d)


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise SchemaError([f"cannot read {path}: {exc.strerror}"]) from None
    except yaml.YAMLError as exc:
        raise SchemaError([f"{path}: not valid YAML ({exc})"]) from None
    return parse_config(doc)
