"""Numpy implementation of the per-voxel BGK kernels.

Every loop below runs over directions (or dimensions) and applies
elementwise operations across voxels, so each voxel sees exactly the same
sequence of double-precision operations as in the compiled kernels.
Reductions such as ``np.sum`` or ``@`` are avoided on purpose: their
summation order is implementation-defined.
"""

import numpy as np

NAME = "python"


def moments(f, e):
    q, n = f.shape
    dim = e.shape[1]
    rho = f[0].copy()
    for i in range(1, q):
        rho += f[i]
    m = np.zeros((dim, n))
    for i in range(q):
        for d in range(dim):
            if e[i, d] > 0:
                m[d] += f[i]
            elif e[i, d] < 0:
                m[d] -= f[i]
    return rho, m / rho


def _usq(u):
    usq = u[0] * u[0]
    for d in range(1, u.shape[0]):
        usq += u[d] * u[d]
    return usq


def _cu(u, ei):
    cu = np.zeros(u.shape[1])
    for d in range(u.shape[0]):
        if ei[d] > 0:
            cu += u[d]
        elif ei[d] < 0:
            cu -= u[d]
    return cu


def equilibrium(rho, u, e, w):
    q = e.shape[0]
    usq = _usq(u)
    feq = np.empty((q, rho.shape[0]))
    for i in range(q):
        cu = _cu(u, e[i])
        feq[i] = w[i] * rho * (1.0 + 3.0 * cu + 4.5 * cu * cu - 1.5 * usq)
    return feq


def collide(f, e, w, omega):
    rho, u = moments(f, e)
    usq = _usq(u)
    a = 1.0 - omega
    out = np.empty_like(f)
    for i in range(f.shape[0]):
        cu = _cu(u, e[i])
        feq = w[i] * rho * (1.0 + 3.0 * cu + 4.5 * cu * cu - 1.5 * usq)
        out[i] = a * f[i] + omega * feq
    return out


def gather(src, table):
    return src[table]


def gather_collide(src, table, e, w, omega):
    return collide(src[table], e, w, omega)
