import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from disagg.commodel import layout_params
from disagg.errors import ConsistencyError, ContractViolation, DecompositionError, InputError
from disagg.lattice import build_lattice
from disagg.layout import Group, Scheme, contiguous_spans
from disagg.lbm import BoundarySpec, DenseSolver, LBMKernel, grid_coords
from disagg.partition import (
    FivePointKernel,
    IdentityKernel,
    PartitionedField,
    TransferLedger,
    VoxelClass,
    check_trace,
    classify_voxels,
    decompose,
    halo_update,
    step_occ,
    trace_json,
)

from conftest import bits_equal, perturbed_equilibrium


def test_decompose_examples():
    d = decompose((4, 4, 64), 8)
    assert [d.thickness(p) for p in range(8)] == [8] * 8
    d = decompose((5, 10), 3)
    assert sorted((d.thickness(p) for p in range(3)), reverse=True) == [4, 3, 3]
    with pytest.raises(DecompositionError):
        decompose((5, 4), 3)
    with pytest.raises(DecompositionError):
        decompose((5, 4), 0)


@given(n=st.integers(2, 200), p=st.integers(1, 100))
def test_decompose_invariants(n, p):
    if n < 2 * p:
        with pytest.raises(DecompositionError):
            decompose((3, n), p)
        return
    d = decompose((3, n), p)
    assert d.slabs[0][0] == 0 and d.slabs[-1][1] == n
    assert all(a[1] == b[0] for a, b in zip(d.slabs, d.slabs[1:]))
    t = [d.thickness(i) for i in range(p)]
    assert min(t) >= 2 and max(t) - min(t) <= 1
    for i in range(p):
        lo, hi = d.neighbors(i)
        assert lo == (i - 1 if i > 0 else None) and hi == (i + 1 if i < p - 1 else None)


def test_classify_voxels_examples():
    d = decompose((6, 5, 12), 3)
    cls = classify_voxels(d, 1)
    assert int((cls == VoxelClass.Shared).sum()) == 2 * 30
    top = classify_voxels(d, 2)
    z = grid_coords(d.local_shape(2))[:, 2]
    assert np.array_equal(top == VoxelClass.Shared, z == 0)
    assert not np.any(classify_voxels(decompose((6, 5, 12), 1), 0) == VoxelClass.Shared)
    with pytest.raises(InputError):
        classify_voxels(d, 3)


def _field(kind, scheme, shape, parts, rng, periodic=False):
    lat = build_lattice(kind)
    n = int(np.prod(shape))
    f = perturbed_equilibrium(lat, n, rng)
    d = decompose(shape, parts, periodic=periodic)
    return PartitionedField(d, scheme, lat, values=f), f


@pytest.mark.parametrize("kind,scheme,alpha,beta_per_s", [
    ("D2Q9", "DisagSoA", 2, 6), ("D3Q19", "SoA", 10, 10), ("D3Q27", "AoS", 2, 54),
])
def test_halo_update_examples(kind, scheme, alpha, beta_per_s, rng):
    shape = (8, 8) if kind == "D2Q9" else (4, 5, 12)
    pf, _ = _field(kind, scheme, shape, 3, rng)
    ledger = TransferLedger()
    halo_update(pf, ledger, 0)
    s = int(np.prod(shape[:-1]))
    assert ledger.params(0, 1) == (alpha, beta_per_s * s)


@pytest.mark.parametrize("scheme", list(Scheme))
@pytest.mark.parametrize("kind", ["D2Q9", "D3Q19"])
def test_halo_contents_match_neighbor_shared_slabs(kind, scheme, rng):
    shape = (5, 9) if kind == "D2Q9" else (3, 4, 9)
    pf, f = _field(kind, scheme, shape, 3, rng)
    halo_update(pf, TransferLedger(), 0)
    lat = pf.lattice
    for part in pf.parts:
        lay = part.layout
        for grp, nbr, sign in ((Group.LowerHalo, part.lower, +1), (Group.UpperHalo, part.upper, -1)):
            if nbr is None:
                continue
            comps = pf.transfer_components(1 if sign > 0 else 0) if scheme != "AoS" else range(lat.q)
            locs = lay.group_locals(grp)
            coords = lay.coords(locs)
            coords[:, -1] += part.slab[0]
            gidx = coords @ np.cumprod((1,) + shape[:-1])
            for c in comps:
                assert np.array_equal(part.buffer[lay.table[c, locs]], f[c, gidx])


def test_ledger_records_and_csv(rng):
    pf, _ = _field("D2Q9", "SoA", (4, 12), 3, rng)
    ledger = TransferLedger()
    halo_update(pf, ledger, 0)
    halo_update(pf, ledger, 1)
    assert ledger.steps() == [0, 1]
    for r in ledger.records:
        assert r.src_span.len == r.dst_span.len == r.elements
    alpha, beta = ledger.params(0)
    assert beta == sum(r.elements for r in ledger.records if r.step == 0)
    rows = list(csv.reader(io.StringIO(ledger.to_csv())))
    assert rows[0] == ["step", "src", "dst", "base_src", "base_dst", "elements"]
    assert len(rows) == 1 + len(ledger)
    # ordered by step, then source partition
    keys = [(int(r[0]), int(r[1])) for r in rows[1:]]
    assert keys == sorted(keys)
    with pytest.raises(ConsistencyError):
        ledger.append(ledger.records[0])


def test_asymmetric_links_detected(rng):
    pf, _ = _field("D2Q9", "SoA", (4, 12), 3, rng)
    pf.parts[1].upper = None
    with pytest.raises(ConsistencyError):
        halo_update(pf, TransferLedger(), 0)


@pytest.mark.parametrize("scheme", list(Scheme))
def test_identity_kernel(scheme, rng):
    pf, f = _field("D3Q19", scheme, (4, 4, 12), 3, rng)
    ledger = TransferLedger()
    step_occ(pf, IdentityKernel(19), ledger)
    assert bits_equal(pf.gather(), f)
    p = layout_params("D3Q19", scheme, 16)
    assert ledger.params(0, 1) == (p.alpha, p.beta)


def _dense_reference(shape, lid, steps, f0=None):
    ref = DenseSolver("D3Q19", BoundarySpec.cavity(shape, lid), 0.56, f0=f0)
    ref.run(steps)
    return ref.f


@pytest.mark.parametrize("parts", [1, 2])
def test_one_step_matches_single_domain(parts, rng):
    shape = (32, 32, 32)
    lid = (0.05, 0.0, 0.0)
    lat = build_lattice("D3Q19")
    f0 = perturbed_equilibrium(lat, 32 ** 3, rng)
    ref = _dense_reference(shape, lid, 1, f0)
    pf = PartitionedField(decompose(shape, parts), "DisagSoA", lat, values=f0)
    step_occ(pf, LBMKernel(lat, 0.56, lid), TransferLedger())
    assert bits_equal(pf.gather(), ref)


@pytest.mark.slow
@pytest.mark.parametrize("scheme", list(Scheme))
def test_hundred_steps_eight_partitions(scheme):
    shape = (16, 16, 32)
    lid = (0.05, 0.0, 0.0)
    ref = _dense_reference(shape, lid, 100)
    lat = build_lattice("D3Q19")
    pf = PartitionedField(decompose(shape, 8), scheme, lat,
                          values=np.repeat(lat.weights[:, None], 16 * 16 * 32, 1))
    kern = LBMKernel(lat, 0.56, lid)
    ledger = TransferLedger()
    for _ in range(100):
        step_occ(pf, kern, ledger)
    assert bits_equal(pf.gather(), ref)


@given(seed=st.integers(0, 2 ** 31), parts=st.sampled_from([1, 2, 4]),
       scheme=st.sampled_from(list(Scheme)), kind=st.sampled_from(["D2Q9", "D3Q19", "D3Q27"]))
def test_partition_count_invariance_property(seed, parts, scheme, kind):
    rng = np.random.default_rng(seed)
    lat = build_lattice(kind)
    shape = (6, 8) if lat.dim == 2 else (4, 5, 8)
    lid = (0.04,) + (0.0,) * (lat.dim - 1)
    f0 = perturbed_equilibrium(lat, int(np.prod(shape)), rng)
    ref = DenseSolver(lat, BoundarySpec.cavity(shape, lid), 0.7, f0=f0)
    ref.run(3)
    pf = PartitionedField(decompose(shape, parts), scheme, lat, values=f0)
    kern = LBMKernel(lat, 0.7, lid)
    for _ in range(3):
        step_occ(pf, kern, TransferLedger())
    assert bits_equal(pf.gather(), ref.f)


@pytest.mark.parametrize("scheme", list(Scheme))
def test_periodic_partition_axis(scheme, rng):
    lat = build_lattice("D2Q9")
    shape = (6, 8)
    f0 = perturbed_equilibrium(lat, 48, rng)
    ref = DenseSolver(lat, BoundarySpec.periodic_box(shape), 0.8, f0=f0)
    ref.run(4)
    pf = PartitionedField(decompose(shape, 2, periodic=True), scheme, lat, values=f0,
                          periodic_axes=(True, True))
    kern = LBMKernel(lat, 0.8)
    for _ in range(4):
        step_occ(pf, kern, TransferLedger())
    assert bits_equal(pf.gather(), ref.f)


@pytest.mark.parametrize("scheme", list(Scheme))
def test_ledger_matches_model_every_step(scheme, rng):
    for kind in ("D2Q9", "D3Q19", "D3Q27"):
        lat = build_lattice(kind)
        shape = (8, 16) if lat.dim == 2 else (4, 4, 16)
        pf = PartitionedField(decompose(shape, 4), scheme, lat, values=perturbed_equilibrium(lat, int(np.prod(shape)), rng))
        kern = LBMKernel(lat, 0.6)
        ledger = TransferLedger()
        for _ in range(3):
            step_occ(pf, kern, ledger)
        p = layout_params(kind, scheme, int(np.prod(shape[:-1])))
        for step in range(3):
            for part in (1, 2):
                assert ledger.params(step, part) == (p.alpha, p.beta)


def test_zero_copy_spans(rng):
    pf, _ = _field("D3Q19", "DisagSoA", (4, 4, 16), 4, rng)
    ledger = TransferLedger()
    halo_update(pf, ledger, 0)
    for r in ledger.records:
        part = pf.parts[r.src]
        up = r.dst == part.upper
        grp = Group.UpperShared if up else Group.LowerShared
        comps = pf.transfer_components(1 if up else 0)
        assert contiguous_spans(part.layout, grp, comps) == [r.src_span]
    pairs = [(r.src, r.dst) for r in ledger.records]
    assert len(pairs) == len(set(pairs))


def test_trace_order_and_json(rng):
    pf, _ = _field("D2Q9", "DisagSoA", (4, 12), 3, rng)
    trace = []
    for _ in range(2):
        step_occ(pf, LBMKernel("D2Q9", 0.7), TransferLedger(), trace=trace)
    assert check_trace(trace)
    kinds = [e["kind"] for e in trace if e["step"] == 0]
    assert kinds.index("shared") > max(i for i, k in enumerate(kinds) if k == "halo")
    assert json.loads(trace_json(trace)) == trace
    bad = [dict(e) for e in trace]
    shared = next(e for e in bad if e["kind"] == "shared" and e["deps"])
    shared["deps"] = []
    with pytest.raises(ConsistencyError):
        check_trace(bad)


def test_debug_mode_rejects_wide_stencil(rng):
    class Wide:
        cardinality = 2

        def prepare(self, nbhd):
            nbhd.address((0, 2), 0)
            return lambda buf: np.zeros((2, nbhd.locals.size))

    d = decompose((4, 8), 2)
    pf = PartitionedField(d, "SoA", 2, values=rng.random((2, 32)))
    with pytest.raises(ContractViolation):
        step_occ(pf, Wide(), TransferLedger(), debug=True)


@pytest.mark.parametrize("scheme", list(Scheme))
def test_five_point_kernel_matches_global_stencil(scheme, rng):
    shape = (6, 12)
    vals = rng.random((2, 72))
    pf = PartitionedField(decompose(shape, 3), scheme, 2, values=vals)
    ledger = TransferLedger()
    step_occ(pf, FivePointKernel(2), ledger)
    g = vals.reshape(2, 12, 6)  # [c, y, x]
    exp = np.zeros_like(g)
    pad = np.pad(g, ((0, 0), (1, 1), (1, 1)))
    for c in range(2):
        acc = np.zeros((12, 6))
        for dy, dx in ((0, -1), (0, 1), (-1, 0), (1, 0)):
            acc += pad[c, 1 + dy:13 + dy, 1 + dx:7 + dx]
        exp[c] = acc * 0.25
    assert np.allclose(pf.gather().reshape(2, 12, 6), exp, rtol=0, atol=1e-15)
    # the vector-field model prints beta for one face; the ledger counts both
    p = layout_params(2, scheme, 6)
    assert ledger.params(0, 1) == (p.alpha, 2 * p.beta)
