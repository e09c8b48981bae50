"""Command-line front end.

    disagg run CONFIG [-o OUTDIR]       run a scenario, write field, diagnostics and reports
    disagg verify [--size N --steps T]  equivalence suites: partition, sparse strategy, fusion
    disagg ledger [...]                 per-step (alpha, beta) of a partitioned run vs the model
    disagg model [--lattice KIND]       halo-update parameters of every layout as CSV
    disagg report DIR [DIR ...]         summary of earlier run outputs

Exit codes: 0 success, 1 a check failed, 2 bad input.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .errors import DisaggError, InstabilityError, SchemaError

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _first_difference(a, b, voxels=None):
    """Text naming the first (component, voxel) where two fields differ bitwise."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape != b.shape:
        return f"shapes differ: {a.shape} vs {b.shape}"
    diff = np.argwhere(a.view(np.uint64) != b.view(np.uint64))
    if not diff.size:
        return None
    c, v = (int(x) for x in diff[0])
    where = voxels[v].tolist() if voxels is not None else v
    return f"component {c} at voxel {where}: {a[c, v]!r} != {b[c, v]!r}"


# -- run --------------------------------------------------------------------------------


def cmd_run(args, out):
    from .config import load_config
    from .io import write_diagnostics, write_field, write_json
    from .lbm import run

    cfg = load_config(args.config)
    outdir = Path(args.output)
    outdir.mkdir(parents=True, exist_ok=True)
    result = run(cfg)
    header = {"shape": list(cfg.shape), "lattice": cfg.lattice, "engine": cfg.engine,
              "layout": cfg.layout if cfg.engine == "partitioned" else "canonical",
              "steps": cfg.steps, "active_voxels": int(result.voxels.shape[0])}
    write_field(outdir / "field", result.field, header)
    np.savetxt(outdir / "voxels.csv", result.voxels, fmt="%d", delimiter=",")
    write_diagnostics(outdir / "diagnostics.csv", result.diagnostics)
    reports = dict(result.reports)
    ledger_csv = reports.pop("ledger_csv", None)
    if ledger_csv is not None:
        (outdir / "ledger.csv").write_text(ledger_csv, encoding="utf-8")
    reports.pop("backend", None)
    reports["config"] = cfg.to_dict()
    reports["centerline_ux"] = [None if np.isnan(v) else float(v) for v in result.centerline]
    write_json(outdir / "reports.json", reports)
    last = result.diagnostics[-1]
    out.write(f"{cfg.scenario} on {cfg.engine}: {cfg.steps} steps, mass {last['mass']!r}, "
              f"max|u| {last['max_u']:.6g}\n")
    out.write(f"wrote {outdir}\n")
    return EXIT_OK


# -- verify -----------------------------------------------------------------------------


def _verify_partition(size, steps):
    from .lbm import BoundarySpec, DenseSolver, LBMKernel, grid_coords
    from .partition import PartitionedField, TransferLedger, check_trace, decompose, step_occ

    shape = (size,) * 3
    lid = (0.05, 0.0, 0.0)
    ref = DenseSolver("D3Q19", BoundarySpec.cavity(shape, lid), 0.56)
    ref.run(steps)
    coords = grid_coords(shape)
    kern = LBMKernel("D3Q19", 0.56, lid)
    for parts in (1, 2, 4):
        for scheme in ("AoS", "SoA", "DisagSoA"):
            pf = PartitionedField(decompose(shape, parts), scheme, ref.lattice,
                                  values=np.repeat(ref.lattice.weights[:, None], coords.shape[0], 1))
            ledger, trace = TransferLedger(), []
            for _ in range(steps):
                step_occ(pf, kern, ledger, trace=trace)
            check_trace(trace)
            bad = _first_difference(ref.f, pf.gather(), coords)
            if bad:
                return f"{parts} partitions, {scheme}: {bad}"
    return None


def _verify_sparse(size, steps):
    from .lbm import grid_coords
    from .sparse import FaceVelocity, SparseLBM, build_block_sparse

    shape = (size,) * 3
    coords = grid_coords(shape)
    lo, hi = size * 3 // 8, size * 5 // 8
    solid = np.all((coords >= lo) & (coords < hi), axis=1)
    grid = build_block_sparse(coords[~solid], 4, shape)
    u = (0.04, 0.0, 0.0)
    faces = FaceVelocity(shape, ((0, 0, u), (0, 1, u)))
    fields = {}
    for strat in ("Naive", "DisagBitmask", "DisagMem"):
        s = SparseLBM(grid, "D3Q19", 0.6, strat, faces=faces, debug=True)
        s.run(steps)
        fields[strat] = s.field()
    vox = grid.coords_of(grid.canonical_order())
    for strat in ("DisagBitmask", "DisagMem"):
        bad = _first_difference(fields["Naive"], fields[strat], vox)
        if bad:
            return f"{strat} vs Naive: {bad}"
    return None


def _verify_fusion(size, steps):
    from .multires import MultiResGrid, MultiResSolver, build_execution_graph, centered_level_map

    size = max(size, 32)  # three graded levels need room for two transition shells
    for levels in (2, 3):
        grid = MultiResGrid(centered_level_map((size,) * 3, levels))
        states = {}
        for fused in (False, True):
            s = MultiResSolver(grid, "D3Q19", 0.56, lid_velocity=(0.05, 0.0, 0.0))
            s.run(steps, build_execution_graph(grid, fused))
            states[fused] = s
        for l in range(levels):
            g = grid.grids[l]
            bad = _first_difference(states[False].field(l), states[True].field(l),
                                    g.coords_of(g.canonical_order()))
            if bad:
                return f"{levels} levels, level {l}: {bad}"
    return None


SUITES = (("partition", _verify_partition), ("sparse-strategy", _verify_sparse), ("fusion", _verify_fusion))


def cmd_verify(args, out):
    if args.size < 16 or args.size % 8:
        raise SchemaError([f"--size must be a multiple of 8 and >= 16; got {args.size}"])
    failed = False
    for name, fn in SUITES:
        if args.suite and name not in args.suite:
            continue
        problem = fn(args.size, args.steps)
        if problem is None:
            out.write(f"PASS {name}\n")
        else:
            failed = True
            out.write(f"FAIL {name}: {problem}\n")
    return EXIT_FAIL if failed else EXIT_OK


# -- ledger -----------------------------------------------------------------------------


def ledger_rows(lattice, layout, partitions, size, steps):
    """Per (step, partition) rows of observed and modelled halo parameters."""
    from .commodel import layout_params
    from .lattice import build_lattice
    from .lbm import LBMKernel
    from .partition import PartitionedField, TransferLedger, decompose, step_occ

    lat = build_lattice(lattice)
    shape = (size,) * lat.dim
    decomp = decompose(shape, partitions)
    n = int(np.prod(shape))
    pf = PartitionedField(decomp, layout, lat, values=np.repeat(lat.weights[:, None], n, 1))
    kern = LBMKernel(lat, 0.6, (0.05,) + (0.0,) * (lat.dim - 1))
    ledger = TransferLedger()
    for _ in range(steps):
        step_occ(pf, kern, ledger)
    model = layout_params(lat.kind, layout, int(np.prod(shape[:-1])))
    rows = []
    for step in ledger.steps():
        for p in range(partitions):
            lower, upper = decomp.neighbors(p)
            interior = lower is not None and upper is not None
            a, b = ledger.params(step, p)
            rows.append({"step": step, "partition": p, "interior": interior, "alpha": a, "beta": b,
                         "model_alpha": model.alpha, "model_beta": model.beta,
                         "match": (a, b) == (model.alpha, model.beta) if interior else None})
    return rows


def cmd_ledger(args, out):
    rows = ledger_rows(args.lattice, args.layout, args.partitions, args.size, args.steps)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["step", "partition", "interior", "alpha", "beta", "model_alpha", "model_beta", "match"])
    ok = True
    for r in rows:
        match = "" if r["match"] is None else ("yes" if r["match"] else "no")
        ok &= r["match"] is not False
        w.writerow([r["step"], r["partition"], "yes" if r["interior"] else "no",
                    r["alpha"], r["beta"], r["model_alpha"], r["model_beta"], match])
    if not any(r["interior"] for r in rows):
        out.write("# no interior partition: use at least 3 partitions\n")
    if not ok:
        bad = next(r for r in rows if r["match"] is False)
        print(f"ledger mismatch at step {bad['step']}, partition {bad['partition']}: "
              f"({bad['alpha']}, {bad['beta']}) != ({bad['model_alpha']}, {bad['model_beta']})",
              file=sys.stderr)
    return EXIT_OK if ok else EXIT_FAIL


# -- model ------------------------------------------------------------------------------


def cmd_model(args, out):
    from .commodel import table_rows

    w = csv.writer(out, lineterminator="\n")
    if args.lattice:
        w.writerow(["layout", "alpha", "beta"])
        for layout, alpha, beta, _ in table_rows(args.lattice, "s"):
            w.writerow([layout, alpha, beta])
        return EXIT_OK
    w.writerow(["field", "layout", "alpha", "beta", "coalesced"])
    for layout, alpha, beta, coal in table_rows(2, "d_x"):
        w.writerow(["vector2", layout, alpha, beta, "yes" if coal else "no"])
    for kind in ("D2Q9", "D3Q19", "D3Q27"):
        for layout, alpha, beta, coal in table_rows(kind, "s"):
            w.writerow([kind, layout, alpha, beta, "yes" if coal else "no"])
    return EXIT_OK


# -- report -----------------------------------------------------------------------------


def cmd_report(args, out):
    from .io import read_diagnostics

    w = csv.writer(out, lineterminator="\n")
    w.writerow(["run", "scenario", "engine", "steps", "mass_start", "mass_end", "rel_drift", "max_u", "extra"])
    missing = []
    for d in args.dirs:
        d = Path(d)
        rep, diag = d / "reports.json", d / "diagnostics.csv"
        if not rep.is_file() or not diag.is_file():
            missing.append(str(d))
            continue
        r = json.loads(rep.read_text(encoding="utf-8"))
        rows = read_diagnostics(diag)
        m0, m1 = rows[0]["mass"], rows[-1]["mass"]
        extra = ""
        if "ledger" in r:
            extra = f"model alpha={r['ledger']['model']['alpha']} beta={r['ledger']['model']['beta']}"
        elif "dispatch" in r:
            extra = "kernels=" + "+".join(f"{k['name']}:{k['blocks']}" for k in r["dispatch"]["kernels"])
        elif "graph" in r:
            extra = f"nodes={r['graph']['nodes']} fused_blocks={r['graph']['fused_blocks']}"
        cfg = r["config"]
        w.writerow([d.name, cfg["scenario"], cfg["engine"], cfg["steps"], repr(m0), repr(m1),
                    f"{(m1 - m0) / m0:.3e}", f"{rows[-1]['max_u']:.6g}", extra])
    if missing:
        raise SchemaError([f"{m}: no reports.json/diagnostics.csv (not a run output directory)" for m in missing])
    return EXIT_OK


# -- entry point ------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="disagg", description="Disaggregated volumetric layouts and LBM checks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a scenario from a YAML config")
    r.add_argument("config")
    r.add_argument("-o", "--output", default="out", help="output directory (default: out)")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", help="run the equivalence suites")
    v.add_argument("--size", type=int, default=16, help="cubic domain edge (default: 16)")
    v.add_argument("--steps", type=int, default=5, help="time steps per suite (default: 5)")
    v.add_argument("--suite", action="append", choices=[n for n, _ in SUITES],
                   help="run only this suite (repeatable)")
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("ledger", help="observed vs modelled halo-update parameters")
    g.add_argument("--lattice", default="D3Q19", choices=["D2Q9", "D3Q19", "D3Q27"])
    g.add_argument("--layout", default="DisagSoA", choices=["AoS", "SoA", "DisagSoA"])
    g.add_argument("--partitions", type=int, default=4)
    g.add_argument("--size", type=int, default=32, help="domain edge (default: 32)")
    g.add_argument("--steps", type=int, default=2)
    g.set_defaults(func=cmd_ledger)

    m = sub.add_parser("model", help="halo-update parameters of every layout")
    m.add_argument("--lattice", choices=["D2Q9", "D3Q19", "D3Q27"],
                   help="print only this lattice's rows as layout,alpha,beta")
    m.set_defaults(func=cmd_model)

    rp = sub.add_parser("report", help="summarize run output directories")
    rp.add_argument("dirs", nargs="+")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None, out=None):
    out = sys.stdout if out is None else out
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args, out)
    except SchemaError as exc:
        for d in exc.diagnostics:
            print(f"config error: {d}", file=sys.stderr)
        return EXIT_USAGE
    except InstabilityError as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except DisaggError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
