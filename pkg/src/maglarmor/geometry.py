"""Coordinates, voxelized magnet assemblies, the field box and the design grid.

Conventions: x is the beam axis (the long side ``L`` of the field box), z the
guide-field / vertical axis along which the assembly splits into two halves,
y the remaining transverse axis.  Everything is stored in SI units (m, T).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

MM = 1e-3
MT = 1e-3

#: Default field-box and design-domain sizes (m).
FIELD_BOX_A = 7 * MM
FIELD_BOX_L = 40 * MM
DESIGN_EXTENT = (20 * MM, 24 * MM, 24 * MM)  # (x, y, z): 24 x 24 transverse, 20 along the beam
DEFAULT_BOX_SAMPLES = (15, 15, 81)  # (y, z, x) i.e. a x a x L order


class GeometryError(ValueError):
    """Invalid geometry (degenerate primitive, overlap, negative gap, ...)."""


class Half(enum.IntEnum):
    FIXED = 0
    TOP = 1
    BOTTOM = 2


def _vec(v, name="vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{name} must be finite, got {arr}")
    return arr


@dataclass(frozen=True)
class Vec3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        _vec((self.x, self.y, self.z), "Vec3")

    @property
    def array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class VoxelMagnet:
    center: np.ndarray
    half_extent: np.ndarray
    magnetization: np.ndarray
    half: Half = Half.FIXED

    def __post_init__(self):
        object.__setattr__(self, "center", _vec(self.center, "center"))
        object.__setattr__(self, "half_extent", _vec(self.half_extent, "half_extent"))
        object.__setattr__(self, "magnetization", _vec(self.magnetization, "magnetization"))
        object.__setattr__(self, "half", Half(self.half))
        if np.any(self.half_extent <= 0):
            raise GeometryError("half_extent components must be strictly positive")
        if np.linalg.norm(self.magnetization) > 2.0:
            raise GeometryError("|magnetization| exceeds the 2 T sanity bound")

    @property
    def volume(self) -> float:
        return float(np.prod(2 * self.half_extent))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


class MagnetAssembly:
    """Uniformly magnetized axis-aligned cuboids, split into movable halves.

    The assembly always remembers its closed (gap = 0) reference geometry;
    :meth:`with_gap` positions the halves absolutely from that reference, so
    applying gaps is never cumulative.  Voxels may carry a ``group`` label
    (segment index) used by the direction optimizer.
    """

    def __init__(self, centers, half_extents, magnetization, halves=None,
                 gap: float = 0.0, groups=None, *, check: bool = True,
                 _reference=None):
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
        n = len(centers)
        half_extents = np.asarray(half_extents, dtype=np.float64).reshape(-1, 3)
        magnetization = np.asarray(magnetization, dtype=np.float64).reshape(-1, 3)
        if halves is None:
            halves = np.zeros(n, dtype=np.int8)
        halves = np.asarray(halves, dtype=np.int8).reshape(-1)
        if groups is None:
            groups = np.arange(n, dtype=np.int64)
        groups = np.asarray(groups, dtype=np.int64).reshape(-1)
        if not (len(half_extents) == len(magnetization) == len(halves) == len(groups) == n):
            raise GeometryError("voxel arrays must have equal lengths")
        if not (np.all(np.isfinite(centers)) and np.all(np.isfinite(half_extents))
                and np.all(np.isfinite(magnetization))):
            raise GeometryError("voxel data must be finite")
        if np.any(half_extents <= 0):
            raise GeometryError("half_extent components must be strictly positive")
        if n and np.max(np.linalg.norm(magnetization, axis=1)) > 2.0:
            raise GeometryError("|magnetization| exceeds the 2 T sanity bound")
        if not math.isfinite(gap) or gap < 0:
            raise GeometryError(f"gap must be >= 0, got {gap}")
        if np.any((halves < 0) | (halves > 2)):
            raise GeometryError("half ids must be FIXED, TOP or BOTTOM")

        if _reference is None:
            _reference = centers - self._shift(halves, gap)
        self._ref = _frozen(_reference)
        self.centers = _frozen(centers)
        self.half_extents = _frozen(half_extents)
        self.magnetization = _frozen(magnetization)
        self.halves = halves.copy()
        self.halves.setflags(write=False)
        self.groups = groups.copy()
        self.groups.setflags(write=False)
        self.gap = float(gap)
        self._mirror = None
        if check:
            self.check_overlaps()

    @staticmethod
    def _shift(halves, gap):
        s = np.zeros((len(halves), 3))
        s[halves == Half.TOP, 2] = 0.5 * gap
        s[halves == Half.BOTTOM, 2] = -0.5 * gap
        return s

    @classmethod
    def empty(cls) -> "MagnetAssembly":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3)))

    @classmethod
    def from_voxels(cls, voxels: Iterable[VoxelMagnet], gap: float = 0.0) -> "MagnetAssembly":
        voxels = list(voxels)
        if not voxels:
            return cls.empty()
        return cls([v.center for v in voxels], [v.half_extent for v in voxels],
                   [v.magnetization for v in voxels], [int(v.half) for v in voxels], gap=gap)

    def __len__(self) -> int:
        return len(self.centers)

    def __repr__(self) -> str:
        return f"MagnetAssembly(n_voxels={len(self)}, gap={self.gap * 1e3:.4g} mm)"

    @property
    def reference_centers(self) -> np.ndarray:
        return self._ref

    @property
    def voxels(self) -> list:
        return [VoxelMagnet(c, h, m, Half(int(k))) for c, h, m, k in
                zip(self.centers, self.half_extents, self.magnetization, self.halves)]

    @property
    def volume(self) -> float:
        return float(np.sum(np.prod(2 * self.half_extents, axis=1)))

    @property
    def n_groups(self) -> int:
        return int(self.groups.max()) + 1 if len(self) else 0

    def _replace(self, **kw) -> "MagnetAssembly":
        args = dict(centers=self.centers, half_extents=self.half_extents,
                    magnetization=self.magnetization, halves=self.halves, gap=self.gap,
                    groups=self.groups, _reference=self._ref, check=False)
        args.update(kw)
        return MagnetAssembly(**args)

    def with_gap(self, dz: float) -> "MagnetAssembly":
        """Halves placed symmetrically at total gap ``dz`` (absolute, not cumulative)."""
        dz = float(dz)
        if not math.isfinite(dz) or dz < 0:
            raise GeometryError(f"gap must be >= 0, got {dz}")
        if dz == self.gap:
            return self
        centers = self._ref + self._shift(self.halves, dz)
        return self._replace(centers=centers, gap=dz)

    def with_magnetization(self, magnetization) -> "MagnetAssembly":
        return self._replace(magnetization=np.asarray(magnetization, dtype=np.float64).reshape(-1, 3))

    def scaled(self, factor: float) -> "MagnetAssembly":
        return self.with_magnetization(self.magnetization * factor)

    def translated(self, offset) -> "MagnetAssembly":
        t = _vec(offset, "offset")
        return self._replace(centers=self.centers + t, _reference=self._ref + t)

    def subset(self, mask) -> "MagnetAssembly":
        mask = np.asarray(mask)
        return MagnetAssembly(self.centers[mask], self.half_extents[mask],
                              self.magnetization[mask], self.halves[mask], gap=self.gap,
                              groups=self.groups[mask], _reference=self._ref[mask], check=False)

    def concat(self, other: "MagnetAssembly") -> "MagnetAssembly":
        if other.gap != self.gap:
            raise GeometryError("cannot concatenate assemblies at different gaps")
        return MagnetAssembly(
            np.vstack([self.centers, other.centers]),
            np.vstack([self.half_extents, other.half_extents]),
            np.vstack([self.magnetization, other.magnetization]),
            np.concatenate([self.halves, other.halves]), gap=self.gap,
            groups=np.concatenate([self.groups, other.groups + self.n_groups]),
            _reference=np.vstack([self._ref, other._ref]))

    def check_overlaps(self, rtol: float = 1e-9) -> None:
        """Raise if any two cuboids share interior volume (touching is allowed)."""
        n = len(self)
        if n < 2:
            return
        lo = self.centers - self.half_extents
        hi = self.centers + self.half_extents
        tol = rtol * max(float(np.max(self.half_extents)), 1e-12)
        order = np.argsort(lo[:, 0], kind="stable")
        lo, hi = lo[order], hi[order]
        starts = lo[:, 0]
        for i in range(n - 1):
            j_end = np.searchsorted(starts, hi[i, 0] - tol, side="left")
            if j_end <= i + 1:
                continue
            js = slice(i + 1, j_end)
            hit = np.all((lo[js] < hi[i] - tol) & (hi[js] > lo[i] + tol), axis=1)
            if np.any(hit):
                j = i + 1 + int(np.argmax(hit))
                raise GeometryError(
                    f"voxels {order[i]} and {order[j]} overlap "
                    f"(centers {self.centers[order[i]]} and {self.centers[order[j]]})")

    def mirror_axes(self, tol: float = 1e-12) -> tuple:
        """Axes ``k`` for which the assembly maps onto itself under ``x_k -> -x_k``.

        Magnetizations transform with :data:`MIRROR_T`, the parity under which
        B_z is even about every mirror plane of the reference designs.
        """
        if self._mirror is None:
            self._mirror = tuple(k for k in range(3) if _is_mirror_symmetric(self, k, tol))
        return self._mirror

    def merged(self) -> "MagnetAssembly":
        """Fuse face-adjacent cuboids with identical magnetization, half and group.

        The field of the union equals the sum of the parts, so the result is an
        exact, cheaper representation.  Runs are fused along x, then y, then z.
        """
        if len(self) < 2:
            return self
        ref_c, h = self._ref.copy(), self.half_extents.copy()
        m, hv, grp = self.magnetization.copy(), self.halves.copy(), self.groups.copy()
        for axis in range(3):
            ref_c, h, m, hv, grp = _merge_axis(ref_c, h, m, hv, grp, axis)
        centers = ref_c + self._shift(hv, self.gap)
        return MagnetAssembly(centers, h, m, hv, gap=self.gap, groups=grp,
                              _reference=ref_c, check=False)


#: Vector parity for each mirror plane: B(S_k r) = MIRROR_T[k] B(r).
MIRROR_T = np.array([[-1.0, 1.0, 1.0], [1.0, -1.0, 1.0], [-1.0, -1.0, 1.0]])


def _voxel_keys(c, h, m, tol):
    scale = max(float(np.max(np.abs(c))), float(np.max(h)), 1e-30)
    mscale = max(float(np.max(np.abs(m))), 1e-30)
    k = np.hstack([np.round(c / (tol * scale)), np.round(h / (tol * scale)),
                   np.round(m / (1e-9 * mscale))])
    return k[np.lexsort(k.T[::-1])]


def _is_mirror_symmetric(asm, axis, tol):
    if len(asm) == 0:
        return True
    c2 = asm.centers.copy()
    c2[:, axis] *= -1
    m2 = asm.magnetization * MIRROR_T[axis]
    a = _voxel_keys(asm.centers, asm.half_extents, asm.magnetization, tol)
    b = _voxel_keys(c2, asm.half_extents, m2, tol)
    # Keys from rounding can straddle a bin edge; fall back to a tolerant compare.
    if np.array_equal(a, b):
        return True
    ia = np.lexsort(np.hstack([asm.centers, asm.half_extents]).T[::-1])
    ib = np.lexsort(np.hstack([np.round(c2, 15), asm.half_extents]).T[::-1])
    scale = max(float(np.max(np.abs(asm.centers))), 1e-30)
    return (np.allclose(asm.centers[ia], c2[ib], rtol=0, atol=1e3 * tol * scale)
            and np.allclose(asm.half_extents[ia], asm.half_extents[ib], rtol=1e-9)
            and np.allclose(asm.magnetization[ia], m2[ib], rtol=1e-9,
                            atol=1e-12 * max(float(np.max(np.abs(m2))), 1e-30)))


def _merge_axis(c, h, m, hv, grp, axis):
    others = [k for k in range(3) if k != axis]
    scale = max(float(np.max(h)), 1e-12)
    q = 1e-9 * scale
    keys = np.column_stack([
        np.round(c[:, others] / q), np.round(h[:, others] / q),
        np.round(m / 1e-15), hv, grp]).astype(np.float64)
    order =np.lexsort((c[:, axis],) + tuple(keys[:, k] for k in range(keys.shape[1] - 1, -1, -1)))
    out_c, out_h, out_m, out_hv, out_g = [], [], [], [], []
    i, n = 0, len(c)
    while i < n:
        a = order[i]
        lo = c[a, axis] - h[a, axis]
        hi = c[a, axis] + h[a, axis]
        j = i + 1
        while j < n:
            b = order[j]
            if not np.array_equal(keys[a], keys[b]):
                break
            if abs((c[b, axis] - h[b, axis]) - hi) > q:
                break
            hi = c[b, axis] + h[b, axis]
            j += 1
        cc = c[a].copy()
        hh = h[a].copy()
        cc[axis] = 0.5 * (lo + hi)
        hh[axis] = 0.5 * (hi - lo)
        out_c.append(cc)
        out_h.append(hh)
        out_m.append(m[a])
        out_hv.append(hv[a])
        out_g.append(grp[a])
        i = j
    return (np.array(out_c), np.array(out_h), np.array(out_m),
            np.array(out_hv, dtype=np.int8), np.array(out_g, dtype=np.int64))


def apply_gap(assembly: MagnetAssembly, dz: float) -> MagnetAssembly:
    """Move Top voxels +dz/2 and Bottom voxels -dz/2 from the closed geometry."""
    if dz < 0:
        raise GeometryError(f"gap must be >= 0, got {dz}")
    return assembly.with_gap(dz)


# -- primitives ---------------------------------------------------------------

@dataclass(frozen=True)
class Cuboid:
    center: tuple
    extents: tuple  # full edge lengths (m)


@dataclass(frozen=True)
class RingSector:
    """Sector of a hollow cylinder.

    ``axis`` is the cylinder axis; angles run counter-clockwise in the
    transverse plane starting at the next axis in cyclic order (for
    ``axis="x"``: from +y towards +z).  ``axial_offset`` is the sector's
    center along the axis.
    """
    axis: str
    r_inner: float
    r_outer: float
    angle_start: float
    angle_end: float
    length: float
    axial_offset: float = 0.0


Primitive = Union[Cuboid, RingSector]
_AXES = {"x": 0, "y": 1, "z": 2}


def voxelize_primitive(primitive: Primitive, voxel_size: float,
                       magnetization=(0.0, 0.0, 0.0), half: Half = Half.FIXED) -> list:
    """Uniform cubic voxels whose centers lie inside ``primitive``.

    Cuboids are tiled exactly: each axis gets ``round(extent / voxel_size)``
    cells (at least one), resized to fill the extent.  Ring sectors use the
    global lattice with cell centers at ``(k + 1/2) * voxel_size``, so sectors
    sharing a boundary partition the lattice without overlap.
    """
    c, h = _voxelize_arrays(primitive, voxel_size)
    mag = _vec(magnetization, "magnetization")
    return [VoxelMagnet(ci, hi, mag, half) for ci, hi in zip(c, h)]


def _voxelize_arrays(primitive: Primitive, voxel_size: float):
    if not (voxel_size > 0 and math.isfinite(voxel_size)):
        raise GeometryError(f"voxel_size must be > 0, got {voxel_size}")
    if isinstance(primitive, Cuboid):
        center = _vec(primitive.center, "center")
        ext = _vec(primitive.extents, "extents")
        if np.any(ext <= 0):
            raise GeometryError(f"degenerate cuboid extents {ext}")
        if np.all(voxel_size > ext * (1 + 1e-12)):
            raise GeometryError(
                f"voxel_size {voxel_size:g} m exceeds the cuboid in every axis ({ext} m)")
        n = np.maximum(1, np.round(ext / voxel_size)).astype(int)
        cell = ext / n
        axes = [center[k] - ext[k] / 2 + (np.arange(n[k]) + 0.5) * cell[k] for k in range(3)]
        g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        return g, np.broadcast_to(cell / 2, g.shape).copy()
    if isinstance(primitive, RingSector):
        p = primitive
        if p.axis not in _AXES:
            raise GeometryError(f"unknown axis {p.axis!r}")
        if not (0 <= p.r_inner < p.r_outer) or p.length <= 0 or p.angle_end <= p.angle_start:
            raise GeometryError("degenerate ring sector")
        ax = _AXES[p.axis]
        u, v = (ax + 1) % 3, (ax + 2) % 3
        k_max = int(math.ceil(p.r_outer / voxel_size)) + 1
        t = (np.arange(-k_max, k_max) + 0.5) * voxel_size
        U, W = np.meshgrid(t, t, indexing="ij")
        rho = np.hypot(U, W)
        phi = np.mod(np.arctan2(W, U) - p.angle_start, 2 * math.pi)
        span = p.angle_end - p.angle_start
        inside = (rho >= p.r_inner) & (rho < p.r_outer) & (phi < span)
        n_ax = max(1, int(round(p.length / voxel_size)))
        cell_ax = p.length / n_ax
        s = p.axial_offset - p.length / 2 + (np.arange(n_ax) + 0.5) * cell_ax
        uu, ww = U[inside], W[inside]
        if uu.size == 0:
            raise GeometryError(
                f"voxel_size {voxel_size:g} m is too coarse: no voxel center falls inside the sector")
        n_t = uu.size
        c = np.zeros((n_t * n_ax, 3))
        c[:, ax] = np.repeat(s, n_t)
        c[:, u] = np.tile(uu, n_ax)
        c[:, v] = np.tile(ww, n_ax)
        h = np.empty_like(c)
        h[:, ax] = cell_ax / 2
        h[:, u] = voxel_size / 2
        h[:, v] = voxel_size / 2
        return c, h
    raise GeometryError(f"unsupported primitive {primitive!r}")


def primitive_volume(primitive: Primitive) -> float:
    if isinstance(primitive, Cuboid):
        return float(np.prod(primitive.extents))
    p = primitive
    return 0.5 * (p.r_outer ** 2 - p.r_inner ** 2) * (p.angle_end - p.angle_start) * p.length


# -- field box ----------------------------------------------------------------

@dataclass(frozen=True)
class FieldBox:
    """Beam region centred at the origin with midpoint-rule quadrature nodes.

    Node order is C order over (x, y, z) index: x slowest, z fastest.
    """
    a: float
    L: float
    n_x: int
    n_y: int
    n_z: int
    points: np.ndarray = field(repr=False, compare=False)
    weights: np.ndarray = field(repr=False, compare=False)

    @property
    def volume(self) -> float:
        return self.a * self.a * self.L

    @property
    def shape(self) -> tuple:
        return (self.n_x, self.n_y, self.n_z)

    @property
    def lo(self) -> np.ndarray:
        return np.array([-self.L / 2, -self.a / 2, -self.a / 2])

    @property
    def hi(self) -> np.ndarray:
        return -self.lo

    def axes(self):
        return (_midpoints(self.L, self.n_x), _midpoints(self.a, self.n_y),
                _midpoints(self.a, self.n_z))

    def octant(self):
        """Nodes with all coordinates >= 0 and weights folded by mirror multiplicity.

        For fields with the three-mirror symmetry of the designs, sums of even
        integrands over these nodes reproduce the full-box sums.
        """
        mask = np.all(self.points >= 0.0, axis=1)
        mult = np.prod(np.where(self.points[mask] > 0.0, 2.0, 1.0), axis=1)
        return self.points[mask], self.weights[mask] * mult

    def center_index(self) -> int:
        """Index of the node nearest the box centre."""
        return int(np.argmin(np.sum(self.points ** 2, axis=1)))


def _midpoints(length, n):
    # (k - (n-1)/2) * step is exactly antisymmetric, so mirrored nodes coincide bitwise
    return (np.arange(n) - (n - 1) / 2) * (length / n)


def build_field_box(a: float = FIELD_BOX_A, L: float = FIELD_BOX_L,
                    n: Sequence[int] = DEFAULT_BOX_SAMPLES) -> FieldBox:
    """Field box of transverse edge ``a`` and length ``L`` (m).

    ``n`` is given in the a x a x L order: (n_y, n_z, n_x).
    """
    if not (a > 0 and L > 0):
        raise GeometryError("field box dimensions must be positive")
    n_y, n_z, n_x = (int(k) for k in n)
    if min(n_x, n_y, n_z) < 2:
        raise GeometryError("each axis needs at least 2 samples")
    xs, ys, zs = _midpoints(L, n_x), _midpoints(a, n_y), _midpoints(a, n_z)
    pts = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    w = np.full(len(pts), a * a * L / (n_x * n_y * n_z))
    pts.setflags(write=False)
    w.setflags(write=False)
    return FieldBox(a, L, n_x, n_y, n_z, pts, w)


# -- design grid --------------------------------------------------------------

@dataclass
class DesignGrid:
    """Voxelized design domain carrying one magnetization vector per active voxel.

    ``active`` masks out the beam corridor; ``magnetization`` has one row per
    active voxel in C order over the (x, y, z) index.
    """
    origin: np.ndarray
    voxel_size: float
    dims: tuple
    active: np.ndarray
    magnetization: np.ndarray = None

    def __post_init__(self):
        self.origin = _vec(self.origin, "origin")
        self.active = np.asarray(self.active, dtype=bool).reshape(self.dims)
        if self.magnetization is None:
            self.magnetization = np.zeros((self.n_active, 3))
        self.magnetization = np.asarray(self.magnetization, dtype=np.float64).reshape(-1, 3)
        if len(self.magnetization) != self.n_active:
            raise GeometryError("one magnetization row per active voxel is required")

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    def centers(self) -> np.ndarray:
        idx = np.argwhere(self.active)
        return self.origin + (idx + 0.5) * self.voxel_size

    def halves(self) -> np.ndarray:
        z = self.centers()[:, 2]
        return np.where(z > 0, Half.TOP, np.where(z < 0, Half.BOTTOM, Half.FIXED)).astype(np.int8)

    def to_assembly(self, magnetization=None, gap: float = 0.0) -> MagnetAssembly:
        m = self.magnetization if magnetization is None else magnetization
        c = self.centers()
        h = np.full_like(c, self.voxel_size / 2)
        hv = self.halves()
        ref = c
        return MagnetAssembly(ref + MagnetAssembly._shift(hv, gap), h, m, hv, gap=gap,
                              _reference=ref, check=False)


def build_design_grid(voxel_size: float = 2 * MM, extent=DESIGN_EXTENT,
                      box_a: float = FIELD_BOX_A, clearance: float = 1 * MM) -> DesignGrid:
    """Design domain centred at the origin minus the beam corridor.

    Voxels intersecting the square corridor of half-width ``box_a/2 + clearance``
    (running the full length in x) are inactive.
    """
    ext = _vec(extent, "extent")
    dims = tuple(int(round(e / voxel_size)) for e in ext)
    if min(dims) < 1 or not np.allclose(np.array(dims) * voxel_size, ext, rtol=1e-9):
        raise GeometryError(f"extent {ext} is not a multiple of voxel_size {voxel_size}")
    origin = -ext / 2
    idx = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), axis=-1)
    lo = origin + idx * voxel_size
    hi = lo + voxel_size
    half_w = box_a / 2 + clearance
    tol = 1e-12
    hits_y = (lo[..., 1] < half_w - tol) & (hi[..., 1] > -half_w + tol)
    hits_z = (lo[..., 2] < half_w - tol) & (hi[..., 2] > -half_w + tol)
    active = ~(hits_y & hits_z)
    return DesignGrid(origin, voxel_size, dims, active)


# -- Halbach layout -------------------------------------------------------------

@dataclass(frozen=True)
class HalbachLayout:
    """Two rows of ring-sector segments around the beam axis (reconstructed defaults)."""
    r_inner: float = 6 * MM
    r_outer: float = 12 * MM
    n_sectors: int = 10
    n_rows: int = 2
    length: float = 20 * MM
    voxel_size: float = 0.5 * MM

    def sectors(self) -> list:
        row_len = self.length / self.n_rows
        out = []
        for row in range(self.n_rows):
            x0 = -self.length / 2 + (row + 0.5) * row_len
            for k in range(self.n_sectors):
                span = 2 * math.pi / self.n_sectors
                out.append(RingSector("x", self.r_inner, self.r_outer, k * span,
                                      (k + 1) * span, row_len, x0))
        return out


def halbach_directions(layout: HalbachLayout, order: int = 2) -> np.ndarray:
    """Unit remanence directions of the ideal Halbach pattern, one per segment.

    A segment at mid-angle ``phi`` (from +y towards +z) is magnetized at angle
    ``order * phi - pi/2``; ``order=2`` gives a dipole field along +z inside.
    """
    dirs = []
    span = 2 * math.pi / layout.n_sectors
    for _row in range(layout.n_rows):
        for k in range(layout.n_sectors):
            phi = (k + 0.5) * span
            th = order * phi - math.pi / 2
            dirs.append([0.0, math.cos(th), math.sin(th)])
    return np.array(dirs)


def build_halbach(layout: HalbachLayout = HalbachLayout(), remanence: float = 68 * MT,
                  directions=None, gap: float = 0.0) -> MagnetAssembly:
    """Voxelized, merged Halbach assembly; segment ``k`` carries group id ``k``."""
    if directions is None:
        directions = halbach_directions(layout)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    sectors = layout.sectors()
    if len(directions) != len(sectors):
        raise GeometryError("one direction per segment is required")
    cs, hs, ms, hv, gs = [], [], [], [], []
    for k, (sec, d) in enumerate(zip(sectors, directions)):
        c, h = _voxelize_arrays(sec, layout.voxel_size)
        cs.append(c)
        hs.append(h)
        ms.append(np.broadcast_to(remanence * d / np.linalg.norm(d), c.shape))
        mid = 0.5 * (sec.angle_start + sec.angle_end)
        hv.append(np.full(len(c), Half.TOP if math.sin(mid) > 0 else Half.BOTTOM, dtype=np.int8))
        gs.append(np.full(len(c), k, dtype=np.int64))
    ref = np.vstack(cs)
    halves = np.concatenate(hv)
    asm = MagnetAssembly(ref, np.vstack(hs), np.vstack(ms), halves, gap=0.0,
                         groups=np.concatenate(gs), check=False).merged()
    return asm.with_gap(gap)
