"""Neutron spin transport through computed fields; polarimeter and interferometer models."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import FIELD_BOX_L, MagnetAssembly
from .magnetostatics import RectCoil, assembly_field, coil_field
from .metrics import DEFAULT_VELOCITY, HBAR, MU_N

GAMMA = 2.0 * abs(MU_N) / HBAR  # rad / (T s)
DEFAULT_STEP = 1e-4
APERTURES = {"3x5": (3e-3, 5e-3), "7x7": (7e-3, 7e-3), "10x10": (10e-3, 10e-3)}

_SX = np.array([[0, 1], [1, 0]], dtype=complex)
_SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
_SZ = np.array([[1, 0], [0, -1]], dtype=complex)
_I2 = np.eye(2, dtype=complex)


class NeutronError(ValueError):
    pass


# -- field sources --------------------------------------------------------------

FieldSource = object  # MagnetAssembly | sequence of RectCoil | callable | None


def as_field(source) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap an assembly, coil list, callable or None as ``points -> B``."""
    if source is None:
        return lambda p: np.zeros((len(p), 3))
    if isinstance(source, MagnetAssembly):
        return lambda p: assembly_field(source, p)
    if callable(source):
        return lambda p: np.asarray(source(p), dtype=np.float64).reshape(-1, 3)
    coils = list(source)
    if all(isinstance(c, RectCoil) for c in coils):
        return lambda p: coil_field(coils, p)
    raise TypeError(f"unsupported field source {type(source).__name__}")


def uniform_field(B) -> Callable[[np.ndarray], np.ndarray]:
    b = np.asarray(B, dtype=np.float64).reshape(3)
    return lambda p: np.broadcast_to(b, (len(p), 3)).copy()


# -- spin and rays --------------------------------------------------------------

@dataclass(frozen=True)
class Spinor:
    up: complex
    down: complex

    @classmethod
    def from_array(cls, v) -> "Spinor":
        v = np.asarray(v, dtype=complex).reshape(2)
        return cls(complex(v[0]), complex(v[1]))

    @property
    def array(self) -> np.ndarray:
        return np.array([self.up, self.down])

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.array))

    def fidelity(self, other: "Spinor") -> float:
        return float(abs(np.vdot(self.array, other.array)) ** 2)

    def polarization(self) -> np.ndarray:
        v = self.array
        return np.real([np.vdot(v, s @ v) for s in (_SX, _SY, _SZ)])


SPIN_UP = Spinor(1, 0)
SPIN_DOWN = Spinor(0, 1)
SPIN_PLUS_X = Spinor(1 / math.sqrt(2), 1 / math.sqrt(2))
SPIN_MINUS_X = Spinor(1 / math.sqrt(2), -1 / math.sqrt(2))


@dataclass(frozen=True)
class Ray:
    """Straight path along +x at transverse position (y, z).

    The integration window is ``[-(L/2 + margin), L/2 + margin]`` with ``L``
    the field-box length, sampled by the midpoint rule at spacing ``step``
    (rounded so that the window is tiled exactly).
    """
    y: float = 0.0
    z: float = 0.0
    v: float = DEFAULT_VELOCITY
    step: float = DEFAULT_STEP
    L: float = FIELD_BOX_L
    margin: float = 0.0

    def __post_init__(self):
        if not self.v > 0:
            raise NeutronError("velocity must be positive")
        if not self.step > 0:
            raise NeutronError("step must be positive")
        if self.margin < 0 or not self.L > 0:
            raise NeutronError("window must be positive")

    @property
    def half_window(self) -> float:
        return self.L / 2 + self.margin

    def samples(self):
        n = max(1, int(round(2 * self.half_window / self.step)))
        dl = 2 * self.half_window / n
        xs = (np.arange(n) - (n - 1) / 2) * dl
        pts = np.column_stack([xs, np.full(n, self.y), np.full(n, self.z)])
        return pts, dl


def _check_path(source, rays: Sequence[Ray]):
    if not isinstance(source, MagnetAssembly) or len(source) == 0:
        return
    lo = source.centers - source.half_extents
    hi = source.centers + source.half_extents
    for r in rays:
        hw = r.half_window
        hit = ((lo[:, 1] < r.y) & (r.y < hi[:, 1]) & (lo[:, 2] < r.z) & (r.z < hi[:, 2])
               & (lo[:, 0] < hw) & (hi[:, 0] > -hw))
        if np.any(hit):
            k = int(np.argmax(hit))
            raise NeutronError(f"ray at y={r.y * 1e3:.3f} mm, z={r.z * 1e3:.3f} mm passes "
                               f"through magnet voxel {k}")


def aperture_rays(aperture=(7e-3, 7e-3), grid=(15, 15), v: float = DEFAULT_VELOCITY,
                  step: float = DEFAULT_STEP, margin: float = 0.0, L: float = FIELD_BOX_L):
    """Midpoint grid of rays over a ``w x h`` aperture (w along y, h along z)."""
    w, h = aperture
    ny, nz = grid
    if ny < 2 or nz < 2:
        raise NeutronError("aperture grid needs at least 2 x 2 rays")
    ys = (np.arange(ny) - (ny - 1) / 2) * (w / ny)
    zs = (np.arange(nz) - (nz - 1) / 2) * (h / nz)
    return [Ray(y, z, v, step, L, margin) for y in ys for z in zs]


def _path_fields(source, rays: Sequence[Ray]):
    fn = as_field(source)
    pts, dls = [], []
    for r in rays:
        p, dl = r.samples()
        pts.append(p)
        dls.append(dl)
    sizes = [len(p) for p in pts]
    B = fn(np.vstack(pts))
    return np.split(B, np.cumsum(sizes)[:-1]), dls


def ray_rotation_angles(source, rays: Sequence[Ray]) -> np.ndarray:
    """Signed Larmor angle of each ray, ``GAMMA / v * integral B_z dl``."""
    _check_path(source, rays)
    Bs, dls = _path_fields(source, rays)
    return np.array([GAMMA / r.v * dl * float(np.sum(B[:, 2])) for r, B, dl in zip(rays, Bs, dls)])


def ray_rotation_angle(source, ray: Ray) -> float:
    return float(ray_rotation_angles(source, [ray])[0])


def _step_unitaries(B: np.ndarray, dl: float, v: float) -> np.ndarray:
    """exp(i (w/2) b.sigma) per step with w = GAMMA |B| dl / v; shape (n, 2, 2)."""
    nb = np.linalg.norm(B, axis=1)
    half = 0.5 * GAMMA * nb * dl / v
    with np.errstate(invalid="ignore", divide="ignore"):
        bh = np.where(nb[:, None] > 0, B / nb[:, None], 0.0)
    c = np.cos(half)
    s = np.sin(half)
    U = np.empty((len(B), 2, 2), dtype=complex)
    U[:, 0, 0] = c + 1j * s * bh[:, 2]
    U[:, 1, 1] = c - 1j * s * bh[:, 2]
    U[:, 0, 1] = 1j * s * (bh[:, 0] - 1j * bh[:, 1])
    U[:, 1, 0] = 1j * s * (bh[:, 0] + 1j * bh[:, 1])
    return U


def propagator(source, ray: Ray) -> np.ndarray:
    """Ordered product of the per-step SU(2) rotations along the ray."""
    _check_path(source, [ray])
    (B,), (dl,) = _path_fields(source, [ray])
    U = _step_unitaries(B, dl, ray.v)
    # pairwise tree reduction keeps the ordering (later steps on the left)
    while len(U) > 1:
        if len(U) % 2:
            U = np.concatenate([U, _I2[None]])
        U = np.matmul(U[1::2], U[0::2])
    return U[0]


def su2_propagate(source, ray: Ray, spin_in: Spinor) -> Spinor:
    out = propagator(source, ray) @ spin_in.array
    return Spinor.from_array(out / np.linalg.norm(out))


def z_rotation(alpha: float) -> np.ndarray:
    return np.cos(alpha / 2) * _I2 + 1j * np.sin(alpha / 2) * _SZ


def x_rotation(theta: float) -> np.ndarray:
    return np.cos(theta / 2) * _I2 - 1j * np.sin(theta / 2) * _SX


# -- dephasing -------------------------------------------------------------------

def phase_coherence(alphas) -> tuple:
    """(arg of the mean phasor, |mean phasor|) of a set of angles."""
    z = np.mean(np.exp(1j * np.asarray(alphas, dtype=np.float64)))
    return float(np.angle(z)), float(min(abs(z), 1.0))


def beam_dephasing(source, aperture=(7e-3, 7e-3), grid=(15, 15), v: float = DEFAULT_VELOCITY,
                   step: float = DEFAULT_STEP, margin: float = 0.0):
    """Mean Larmor angle and predicted spin contrast over an aperture ray grid."""
    rays = aperture_rays(aperture, grid, v, step, margin)
    return phase_coherence(ray_rotation_angles(source, rays))


# -- interferograms -------------------------------------------------------------

@dataclass
class SineFit:
    offset: float
    amplitude: float
    phase: float

    @property
    def contrast(self) -> float:
        return self.amplitude / self.offset if self.offset else float("nan")


def fit_sinusoid(xs, ys, period: float) -> SineFit:
    """Least squares ``y = o + b cos(kx) + c sin(kx)``; phase = atan2(-c, b)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if len(x) != len(y):
        raise ValueError("xs and ys differ in length")
    if len(x) < 4:
        raise ValueError("sinusoid fit needs at least 4 points")
    if not period > 0:
        raise ValueError("period must be positive")
    k = 2 * math.pi / period
    A = np.column_stack([np.ones_like(x), np.cos(k * x), np.sin(k * x)])
    if np.ptp(x) == 0 or np.linalg.matrix_rank(A) < 3:
        raise ValueError("rank-deficient sinusoid design matrix")
    if np.ptp(x) < 0.5 * period:
        raise ValueError("scan spans less than half a period")
    (o, b, c), *_ = np.linalg.lstsq(A, y, rcond=None)
    return SineFit(float(o), float(math.hypot(b, c)), float(math.atan2(-c, b)))


@dataclass
class Interferogram:
    values: np.ndarray
    intensity: np.ndarray
    fit: SineFit
    period: float

    @property
    def contrast(self) -> float:
        return self.fit.contrast

    def write_csv(self, path, value_name: str = "scan_value", scale: float = 1.0) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([value_name, "intensity"])
            for v, i in zip(self.values * scale, self.intensity):
                w.writerow([f"{v:.12g}", f"{i:.12g}"])
        side = str(path)
        side = (side[:-4] if side.endswith(".csv") else side) + "_fit.csv"
        with open(side, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["offset", "amplitude", "phase", "contrast"])
            w.writerow([f"{v:.12g}" for v in (self.fit.offset, self.fit.amplitude,
                                               self.fit.phase, self.contrast)])


def _make(values, intensity, period) -> Interferogram:
    values = np.asarray(values, dtype=np.float64)
    intensity = np.clip(np.asarray(intensity, dtype=np.float64), 0.0, None)
    return Interferogram(values, intensity, fit_sinusoid(values, intensity, period), period)


def precession_period(guide_B0: float, v: float = DEFAULT_VELOCITY) -> float:
    """Distance (m) over which the guide field turns the spin by 2 pi."""
    return 2 * math.pi * v / (GAMMA * guide_B0)


def polarimeter_intensity(alpha, guide_B0: float, v: float, positions) -> np.ndarray:
    """Analyzer transmission for spin |+z>, DC1 = R_x(pi/2), guide precession, DC2 = R_x(-pi/2).

    ``alpha`` may be one angle or per-ray angles (averaged incoherently).
    """
    if not guide_B0 > 0:
        raise NeutronError("guide field must be positive")
    x = np.asarray(positions, dtype=np.float64)
    if x.size == 0:
        raise NeutronError("no DC2 positions given")
    alphas = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
    phi = GAMMA * guide_B0 * x / v
    dc1, dc2 = x_rotation(math.pi / 2), x_rotation(-math.pi / 2)
    psi0 = dc1 @ np.array([1.0, 0.0], dtype=complex)
    tot = np.zeros_like(x)
    for a in alphas:
        ph = phi + a
        # z rotation is diagonal: apply as phases
        psi = np.stack([np.exp(0.5j * ph) * psi0[0], np.exp(-0.5j * ph) * psi0[1]], axis=1)
        out = psi @ dc2.T
        tot += np.abs(out[:, 0]) ** 2
    return tot / len(alphas)


def polarimeter_scan(alpha, guide_B0: float, v: float, dc2_positions) -> Interferogram:
    """Intensity versus DC2 position; the fitted phase equals the rotator angle (mod 2 pi)."""
    I = polarimeter_intensity(alpha, guide_B0, v, dc2_positions)
    return _make(dc2_positions, I, precession_period(guide_B0, v))


def interferogram_closed_form(alpha: float, C: float, chis) -> Interferogram:
    """O-beam intensity ``(1 + C cos(alpha/2) cos chi) / 2``."""
    if not 0.0 <= C <= 1.0:
        raise ValueError("contrast C must lie in [0, 1]")
    chis = np.asarray(chis, dtype=np.float64)
    I = 0.5 * (1.0 + C * math.cos(alpha / 2) * np.cos(chis))
    return _make(chis, I, 2 * math.pi)


def _oracle_raw(alpha: float, chis) -> np.ndarray:
    # path basis (|I>, |II>) tensor spin (up, down)
    path = np.array([1.0, 1.0]) / math.sqrt(2)
    rho = np.kron(np.outer(path, path), 0.5 * _I2)
    o = np.array([1.0, 1.0]) / math.sqrt(2)
    Pf = np.kron(np.outer(o, o), _I2)
    out = []
    for chi in np.atleast_1d(chis):
        U = (np.kron(np.diag([1.0, 0.0]), np.exp(1j * chi) * z_rotation(alpha))
             + np.kron(np.diag([0.0, 1.0]), _I2))
        M = Pf @ U
        out.append(np.real(np.trace(M @ rho @ M.conj().T)))
    return np.array(out)


def interferogram_oracle(alpha: float, chis) -> Interferogram:
    """Density-matrix evaluation of the interferometer with a spin rotator in path I."""
    I = _oracle_raw(alpha, chis) / _oracle_raw(0.0, [0.0])[0]
    return _make(chis, I, 2 * math.pi)


def spin_contrast(I0: float, Ipi: float) -> float:
    s = I0 + Ipi
    if s == 0:
        raise ValueError("I0 + Ipi must be nonzero")
    return (I0 - Ipi) / s


def unwrap_phases(phases) -> np.ndarray:
    """Nearest-branch continuation from the previous point."""
    p = np.asarray(phases, dtype=np.float64).copy()
    for k in range(1, len(p)):
        p[k] = p[k - 1] + (math.remainder(p[k] - p[k - 1], 2 * math.pi))
    return p
