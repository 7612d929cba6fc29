"""Flux density of magnetized cuboids and rectangular coils, sampled on field boxes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels
from .geometry import MIRROR_T, FieldBox, GeometryError, MagnetAssembly, VoxelMagnet, _vec

MU0 = 4e-7 * np.pi
EDGE_EPS = 1e-9
FD_STEP = 5e-5
WIRE_TOL = 1e-6

# Fourth-order central difference: f' ~ (8(f(+h) - f(-h)) - (f(+2h) - f(-2h))) / 12h
_FD_OFFSETS = np.array([-2.0, -1.0, 1.0, 2.0])
_FD_COEFFS = np.array([1.0, -8.0, 8.0, -1.0]) / 12.0


class FieldError(ValueError):
    """Field evaluation requested somewhere it is undefined."""


@dataclass
class FieldSampleSet:
    """Flux density (T) and optionally its Jacobian ``gradB[k, i, j] = dB_i/dx_j`` (T/m)."""
    points: np.ndarray
    weights: np.ndarray
    B: np.ndarray
    gradB: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.points)
        if len(self.weights) != n or len(self.B) != n:
            raise ValueError("points, weights and B must have equal lengths")
        if self.gradB is not None and len(self.gradB) != n:
            raise ValueError("gradB length does not match points")

    def __len__(self) -> int:
        return len(self.points)

    def divergence(self) -> np.ndarray:
        return np.trace(self.gradB, axis1=1, axis2=2)

    def curl(self) -> np.ndarray:
        g = self.gradB
        return np.stack([g[:, 2, 1] - g[:, 1, 2], g[:, 0, 2] - g[:, 2, 0],
                         g[:, 1, 0] - g[:, 0, 1]], axis=1)


def _points(r) -> tuple[np.ndarray, bool]:
    arr = np.asarray(r, dtype=np.float64)
    single = arr.ndim == 1
    arr = np.ascontiguousarray(arr.reshape(-1, 3))
    if not np.all(np.isfinite(arr)):
        raise FieldError("evaluation points must be finite")
    return arr, single


def _threads(n_threads):
    return kernels.default_threads() if n_threads is None else max(1, int(n_threads))


def cuboid_field(voxel: VoxelMagnet, r, n_threads: Optional[int] = None) -> np.ndarray:
    """B (T) of one uniformly magnetized cuboid at ``r`` (a point or an (n, 3) array).

    Points inside the cuboid get the full interior flux density ``B = mu0 (H + M)``.
    Points within ``EDGE_EPS`` of the surface are pushed outward by ``EDGE_EPS``.
    """
    pts, single = _points(r)
    out = kernels.cuboid_field_sum(pts, voxel.center[None], voxel.half_extent[None],
                                   voxel.magnetization[None], EDGE_EPS, _threads(n_threads))
    return out[0] if single else out


def assembly_field(assembly: MagnetAssembly, r, n_threads: Optional[int] = None,
                   use_symmetry: bool = True) -> np.ndarray:
    """Superposed B (T) of every voxel of ``assembly`` at ``r``.

    When the assembly is mirror symmetric (see ``MagnetAssembly.mirror_axes``)
    the points are folded onto the symmetric half-spaces, deduplicated,
    evaluated once and mapped back, which is exact up to rounding.
    """
    pts, single = _points(r)
    if len(assembly) == 0:
        out = np.zeros_like(pts)
    else:
        axes = assembly.mirror_axes() if use_symmetry and len(pts) > 64 else ()
        out = _folded_field(assembly, pts, axes, _threads(n_threads))
    return out[0] if single else out


def _raw_field(assembly, pts, nt):
    return kernels.cuboid_field_sum(pts, assembly.centers, assembly.half_extents,
                                    assembly.magnetization, EDGE_EPS, nt)


def _folded_field(assembly, pts, axes, nt):
    if not axes:
        return _raw_field(assembly, pts, nt)
    folded = pts.copy()
    parity = np.ones_like(pts)
    for k in axes:
        neg = folded[:, k] < 0
        folded[neg, k] *= -1
        parity[neg] *= MIRROR_T[k]
    uniq, inverse = np.unique(folded, axis=0, return_inverse=True)
    if len(uniq) > 0.8 * len(pts):
        return _raw_field(assembly, pts, nt)
    return _raw_field(assembly, uniq, nt)[inverse.reshape(-1)] * parity


def stencil_points(points: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Finite-difference stencil, shape (P, 3 axes, 4 offsets, 3)."""
    st = np.repeat(points[:, None, None, :], 3, axis=1).repeat(4, axis=2)
    for j in range(3):
        st[:, j, :, j] += _FD_OFFSETS * h
    return st


def fd_gradient(values: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Combine stencil values (P, 3, 4, 3) into ``gradB[p, i, j]``."""
    # differences first, so constant fields give exactly zero
    d1 = values[:, :, 2, :] - values[:, :, 1, :]
    d2 = values[:, :, 3, :] - values[:, :, 0, :]
    return np.swapaxes(8.0 * d1 - d2, 1, 2) / (12.0 * h)


def check_clearance(assembly: MagnetAssembly, lo, hi, margin: float = 0.0) -> None:
    """Raise if any voxel shares interior volume with the box ``[lo, hi]`` grown by ``margin``."""
    if len(assembly) == 0:
        return
    lo = np.asarray(lo) - margin
    hi = np.asarray(hi) + margin
    vlo = assembly.centers - assembly.half_extents
    vhi = assembly.centers + assembly.half_extents
    hit = np.all((vlo < hi) & (vhi > lo), axis=1)
    if np.any(hit):
        k = int(np.argmax(hit))
        c = assembly.centers[k] * 1e3
        raise GeometryError(
            f"field box intersects magnet voxel {k} centred at "
            f"({c[0]:.3f}, {c[1]:.3f}, {c[2]:.3f}) mm")


def field_on_samples(assembly: Optional[MagnetAssembly], box: FieldBox,
                     with_gradients: bool = False, *, h: float = FD_STEP,
                     external: Optional[Callable[[np.ndarray], np.ndarray]] = None,
                     coils: Sequence["RectCoil"] = (),
                     n_threads: Optional[int] = None) -> FieldSampleSet:
    """Evaluate B (and fourth-order central-difference gradients) at the box nodes.

    ``external`` is an optional callable mapping (n, 3) points to (n, 3) fields
    that is added to the magnet and coil contributions (used for test stubs
    such as a uniform field).
    """
    pts = np.asarray(box.points)
    if assembly is not None:
        check_clearance(assembly, box.lo, box.hi, margin=2 * h if with_gradients else 0.0)

    def total(p):
        b = np.zeros_like(p)
        if assembly is not None and len(assembly):
            b += assembly_field(assembly, p, n_threads)
        if coils:
            b += coil_field(coils, p)
        if external is not None:
            b += np.asarray(external(p), dtype=np.float64).reshape(p.shape)
        return b

    if not with_gradients:
        return FieldSampleSet(pts, np.asarray(box.weights), total(pts))
    st = stencil_points(pts, h)
    flat = np.concatenate([pts, st.reshape(-1, 3)])
    vals = total(flat)
    B = vals[: len(pts)]
    grad = fd_gradient(vals[len(pts):].reshape(st.shape), h)
    return FieldSampleSet(pts, np.asarray(box.weights), B, grad)


# -- coils --------------------------------------------------------------------

@dataclass(frozen=True)
class RectCoil:
    """Rectangular loop in a plane normal to z.

    ``width`` spans x and ``height`` spans y; positive current circulates
    counter-clockwise seen from +z, producing +B_z at the centre.
    """
    center: tuple
    width: float
    height: float
    turns: int = 1
    current: float = 0.0

    def __post_init__(self):
        _vec(self.center, "center")
        if not (self.width > 0 and self.height > 0):
            raise GeometryError("coil dimensions must be positive")
        if int(self.turns) != self.turns or self.turns < 1:
            raise GeometryError("turns must be an integer >= 1")

    def with_current(self, current: float) -> "RectCoil":
        return RectCoil(self.center, self.width, self.height, self.turns, current)

    def corners(self) -> np.ndarray:
        c = _vec(self.center)
        w, hh = self.width / 2, self.height / 2
        offs = np.array([[w, -hh, 0], [w, hh, 0], [-w, hh, 0], [-w, -hh, 0]])
        return c + offs


def _segment_field(pts, a, b):
    """mu0/(4 pi) units omitted: field of unit current from a to b."""
    r1 = a - pts
    r2 = b - pts
    n1 = np.linalg.norm(r1, axis=1)
    n2 = np.linalg.norm(r2, axis=1)
    cross = np.cross(r1, r2)
    denom = n1 * n2 * (n1 * n2 + np.einsum("ij,ij->i", r1, r2))
    return cross * ((n1 + n2) / denom)[:, None]


def _segment_distance(pts, a, b):
    ab = b - a
    t = np.clip((pts - a) @ ab / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(pts - (a + t[:, None] * ab), axis=1)


def coil_field(coils: Sequence[RectCoil], r) -> np.ndarray:
    """Biot-Savart field (T) of rectangular loops from the exact straight-segment formula."""
    pts, single = _points(r)
    out = np.zeros_like(pts)
    for coil in coils:
        cn = coil.corners()
        for k in range(4):
            a, b = cn[k], cn[(k + 1) % 4]
            d = _segment_distance(pts, a, b)
            if np.any(d < WIRE_TOL):
                i = int(np.argmin(d))
                raise FieldError(f"point {pts[i] * 1e3} mm lies within 1e-6 m of a coil wire")
            if coil.current != 0.0:
                out += (MU0 * coil.current * coil.turns / (4 * np.pi)) * _segment_field(pts, a, b)
    return out[0] if single else out


def helmholtz_pair(width: float, height: float, separation: float, turns: int = 1,
                   current: float = 1.0) -> list:
    """Two coaxial rectangular loops at z = +-separation/2 carrying the same current."""
    return [RectCoil((0.0, 0.0, s * separation / 2), width, height, turns, current)
            for s in (-1, 1)]


# -- export -------------------------------------------------------------------

GRAD_NAMES = [f"dB{c}_d{x}_T_per_m" for c in "xyz" for x in "xyz"]


def write_field_map(path, samples: FieldSampleSet, with_gradients: Optional[bool] = None) -> None:
    """CSV with positions in mm, B in mT, gradients (if any) in T/m."""
    if with_gradients is None:
        with_gradients = samples.gradB is not None
    if with_gradients and samples.gradB is None:
        raise ValueError("samples carry no gradients")
    cols = [samples.points * 1e3, samples.B * 1e3]
    header = ["x_mm", "y_mm", "z_mm", "Bx_mT", "By_mT", "Bz_mT"]
    if with_gradients:
        cols.append(samples.gradB.reshape(-1, 9))
        header += GRAD_NAMES
    data = np.hstack(cols)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        np.savetxt(fh, data, delimiter=",", fmt="%.12g")
