"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--size 32] [--lattice D3Q19] [--repeat 5]

Times collide, gather and gather_collide on a cubic domain with a periodic
pull table, and checks that both backends return identical bits.
"""

import argparse
import time

import numpy as np

from disagg import kernels
from disagg.lattice import build_lattice
from disagg.lbm import bitwise_equal, grid_coords, linear_index


def periodic_table(lat, shape):
    coords = grid_coords(shape)
    n = coords.shape[0]
    table = np.empty((lat.q, n), dtype=np.int64)
    for i, e in enumerate(lat.velocities):
        src = (coords - e) % np.array(shape)
        table[i] = i * n + linear_index(src, shape)
    return table


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--lattice", default="D3Q19", choices=["D2Q9", "D3Q19", "D3Q27"])
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()

    lat = build_lattice(args.lattice)
    shape = (args.size,) * lat.dim
    n = int(np.prod(shape))
    rng = np.random.default_rng(0)
    f = np.repeat(lat.weights[:, None], n, 1) * (1 + 0.01 * rng.random((lat.q, n)))
    table = periodic_table(lat, shape)
    e, w, omega = lat.velocities, lat.weights, 1 / 0.6
    ops = {
        "collide": lambda: kernels.collide(f, e, w, omega),
        "gather": lambda: kernels.gather(f.ravel(), table),
        "gather_collide": lambda: kernels.gather_collide(f.ravel(), table, e, w, omega),
    }
    print(f"{args.lattice} on {'x'.join(map(str, shape))} ({n} voxels), best of {args.repeat}")
    print(f"{'kernel':<16}" + "".join(f"{b:>12}" for b in kernels.available()) + f"{'speedup':>10}{'equal':>8}")
    for name, fn in ops.items():
        times, outs = {}, {}
        for b in kernels.available():
            with kernels.use_backend(b):
                times[b], outs[b] = best_of(fn, args.repeat)
        row = f"{name:<16}" + "".join(f"{times[b] * 1e3:>10.2f}ms" for b in kernels.available())
        if len(times) == 2:
            same = bitwise_equal(outs["cython"], outs["python"])
            row += f"{times['python'] / times['cython']:>9.1f}x{str(same):>8}"
        print(row)


if __name__ == "__main__":
    main()
