# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled cuboid field kernels (thin wrappers over ``_cuboid.h``)."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef extern from "_cuboid.h" nogil:
    int ml_field_sum(long P, const double *pts, long V,
                     const double *cx, const double *cy, const double *cz,
                     const double *hx, const double *hy, const double *hz,
                     const double *mx, const double *my, const double *mz,
                     double eps, int nthreads, double *out)
    int ml_tensor_groups(long P, const double *pts, long V,
                         const double *cx, const double *cy, const double *cz,
                         const double *hx, const double *hy, const double *hz,
                         const double *colsign, const long *group, long G,
                         double eps, int nthreads, double *out)


def _soa(arr):
    a = np.asarray(arr, dtype=np.float64)
    return (np.ascontiguousarray(a[:, 0]), np.ascontiguousarray(a[:, 1]),
            np.ascontiguousarray(a[:, 2]))


def cuboid_field_sum(points, centers, half, mag, double eps=1e-9, int n_threads=1):
    """Superposed flux density (T) of all cuboids at every point, shape (P, 3)."""
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef long P = pts.shape[0]
    out = np.zeros((P, 3), dtype=np.float64)
    cdef long V = len(centers)
    if V == 0 or P == 0:
        return out
    cx, cy, cz = _soa(centers)
    hx, hy, hz = _soa(half)
    mx, my, mz = _soa(mag)
    cdef const double[::1] vcx = cx, vcy = cy, vcz = cz, vhx = hx, vhy = hy, vhz = hz
    cdef const double[::1] vmx = mx, vmy = my, vmz = mz
    cdef double[:, ::1] vout = out
    cdef int rc
    with nogil:
        rc = ml_field_sum(P, &pts[0, 0], V, &vcx[0], &vcy[0], &vcz[0],
                          &vhx[0], &vhy[0], &vhz[0], &vmx[0], &vmy[0], &vmz[0],
                          eps, n_threads, &vout[0, 0])
    if rc != 0:
        raise MemoryError("cuboid_field_sum: scratch allocation failed")
    return out


def cuboid_tensor_groups(points, centers, half, colsign, group, long n_groups,
                         double eps=1e-9, int n_threads=1):
    """Group-summed tensors, shape (P, n_groups, 3, 3).

    ``out[p, g, i, j] = sum_{v in g} N_ij(p, v) * colsign[v, j]``: the linear
    map from a group's shared magnetization variable to B.
    """
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef long P = pts.shape[0]
    out = np.zeros((P, n_groups, 3, 3), dtype=np.float64)
    cdef long V = len(centers)
    if V == 0 or P == 0:
        return out
    cx, cy, cz = _soa(centers)
    hx, hy, hz = _soa(half)
    sg = np.ascontiguousarray(colsign, dtype=np.float64)
    grp = np.ascontiguousarray(group, dtype=np.int64)
    if grp.min() < 0 or grp.max() >= n_groups:
        raise ValueError("group index out of range")
    cdef const double[::1] vcx = cx, vcy = cy, vcz = cz, vhx = hx, vhy = hy, vhz = hz
    cdef const double[:, ::1] vsg = sg
    cdef const long[::1] vgrp = grp
    cdef double[:, :, :, ::1] vout = out
    cdef int rc
    with nogil:
        rc = ml_tensor_groups(P, &pts[0, 0], V, &vcx[0], &vcy[0], &vcz[0],
                              &vhx[0], &vhy[0], &vhz[0], &vsg[0, 0], &vgrp[0],
                              n_groups, eps, n_threads, &vout[0, 0, 0, 0])
    if rc != 0:
        raise MemoryError("cuboid_tensor_groups: scratch allocation failed")
    return out
