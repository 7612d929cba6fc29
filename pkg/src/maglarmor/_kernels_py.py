"""Pure-numpy twin of the compiled cuboid kernels (``_kernels.pyx``).

Used when the extension is not built or when ``MAGLARMOR_PURE_PYTHON=1``.
Vectorised over (point block, voxel); slower by roughly an order of magnitude.
"""
from __future__ import annotations

import numpy as np

_INV4PI = 0.25 / np.pi
_BLOCK = 64


def _atan_pair(u, v, w0, w1, R0, R1):
    uv = u * v
    nz0 = w0 != 0.0
    nz1 = w1 != 0.0
    re0 = np.where(nz0, np.abs(w0) * R0, 1.0)
    im0 = np.where(nz0, np.where(w0 > 0.0, uv, -uv), 0.0)
    re1 = np.where(nz1, np.abs(w1) * R1, 1.0)
    im1 = np.where(nz1, np.where(w1 > 0.0, uv, -uv), 0.0)
    return np.arctan2(im1 * re0 - re1 * im0, re1 * re0 + im1 * im0)


def _log_ratio(t0, t1, rho2, R0, R1):
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = (t1 + R1) / (t0 + R0)
        neg = (R0 - t0) / (R1 - t1)
        mixed = (t1 + R1) * (R0 - t0) / rho2
    return np.where(t0 >= 0.0, pos, np.where(t1 <= 0.0, neg, mixed))


def cuboid_tensor(points, centers, half, eps=1e-9):
    """Tensors N for every (point, voxel) pair, shape (P, V, 3, 3)."""
    p = np.asarray(points, dtype=np.float64)[:, None, :]
    c = np.asarray(centers, dtype=np.float64)[None, :, :]
    h = np.asarray(half, dtype=np.float64)[None, :, :]
    d = p - c
    e = np.abs(d) - h
    h = np.broadcast_to(h, d.shape)
    axis = np.argmax(e, axis=-1)
    emax = np.max(e, axis=-1)
    inside = np.all(e < 0.0, axis=-1)
    dist = np.where(inside, -emax, np.sqrt(np.sum(np.maximum(e, 0.0) ** 2, axis=-1)))
    near = dist < eps
    if np.any(near):
        d = d.copy()
        idx = np.nonzero(near)
        ax = axis[idx]
        dv = d[idx + (ax,)]
        hv = h[idx + (ax,)]
        d[idx + (ax,)] = np.where(dv >= 0.0, hv + eps, -(hv + eps))
        inside = inside & ~near

    a = (-h[..., 0] - d[..., 0], h[..., 0] - d[..., 0])
    b = (-h[..., 1] - d[..., 1], h[..., 1] - d[..., 1])
    cc = (-h[..., 2] - d[..., 2], h[..., 2] - d[..., 2])
    R = [[[np.sqrt(a[i] ** 2 + b[j] ** 2 + cc[k] ** 2) for k in range(2)]
          for j in range(2)] for i in range(2)]

    shape = d.shape[:-1]
    sxx = np.zeros(shape)
    syy = np.zeros(shape)
    szz = np.zeros(shape)
    lxy = np.zeros(shape)
    lxz = np.zeros(shape)
    lyz = np.zeros(shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        for i in range(2):
            for j in range(2):
                s = 1.0 if i == j else -1.0
                szz += s * _atan_pair(a[i], b[j], cc[0], cc[1], R[i][j][0], R[i][j][1])
                sxx += s * _atan_pair(b[i], cc[j], a[0], a[1], R[0][i][j], R[1][i][j])
                syy += s * _atan_pair(a[i], cc[j], b[0], b[1], R[i][0][j], R[i][1][j])
                lxy += s * np.log(_log_ratio(cc[0], cc[1], a[i] ** 2 + b[j] ** 2,
                                             R[i][j][0], R[i][j][1]))
                lxz += s * np.log(_log_ratio(b[0], b[1], a[i] ** 2 + cc[j] ** 2,
                                             R[i][0][j], R[i][1][j]))
                lyz += s * np.log(_log_ratio(a[0], a[1], b[i] ** 2 + cc[j] ** 2,
                                             R[0][i][j], R[1][i][j]))

    N = np.empty(shape + (3, 3))
    N[..., 0, 0] = -_INV4PI * sxx + inside
    N[..., 1, 1] = -_INV4PI * syy + inside
    N[..., 2, 2] = -_INV4PI * szz + inside
    N[..., 0, 1] = N[..., 1, 0] = _INV4PI * lxy
    N[..., 0, 2] = N[..., 2, 0] = _INV4PI * lxz
    N[..., 1, 2] = N[..., 2, 1] = _INV4PI * lyz
    return N


def cuboid_field_sum(points, centers, half, mag, eps=1e-9, n_threads=1):
    points = np.ascontiguousarray(points, dtype=np.float64)
    mag = np.asarray(mag, dtype=np.float64)
    out = np.zeros((len(points), 3))
    if len(centers) == 0:
        return out
    for start in range(0, len(points), _BLOCK):
        N = cuboid_tensor(points[start:start + _BLOCK], centers, half, eps)
        out[start:start + _BLOCK] = np.einsum("pvij,vj->pi", N, mag)
    return out


def cuboid_tensor_groups(points, centers, half, colsign, group, n_groups,
                         eps=1e-9, n_threads=1):
    points = np.ascontiguousarray(points, dtype=np.float64)
    group = np.asarray(group, dtype=np.int64)
    out = np.zeros((len(points), n_groups, 3, 3))
    if len(centers) == 0:
        return out
    colsign = np.asarray(colsign, dtype=np.float64)
    for start in range(0, len(points), _BLOCK):
        N = cuboid_tensor(points[start:start + _BLOCK], centers, half, eps)
        N = N * colsign[None, :, None, :]
        blk = out[start:start + _BLOCK]
        np.add.at(blk, (slice(None), group), N)
    return out
