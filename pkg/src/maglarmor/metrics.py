"""Figures of merit: action, homogeneity functional, relative error, Larmor angle."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .magnetostatics import FieldSampleSet

MU_N = -9.6623647e-27  # J/T
HBAR = 1.054571817e-34  # J s
DEFAULT_VELOCITY = 2041.5  # m/s, gives alpha = pi at 35 mT mm

# 1 T m = 1e3 mT * 1e3 mm
T_M_TO_MT_MM = 1e6


@dataclass(frozen=True)
class PhysicalConstants:
    mu_N: float = MU_N
    hbar: float = HBAR


class MetricError(ValueError):
    pass


def action(samples: FieldSampleSet, a: float) -> float:
    """Cross-section-averaged path integral of |B_z| over the box, in mT mm."""
    if not a or not np.isfinite(a):
        raise MetricError("transverse edge a must be nonzero")
    if len(samples) == 0:
        raise MetricError("empty sample set")
    th = np.sum(samples.weights * np.abs(samples.B[:, 2])) / (a * a)
    return float(th * T_M_TO_MT_MM)


def _require_grad(samples):
    if samples.gradB is None:
        raise MetricError("sample set carries no gradients")
    return samples.gradB


def functional_j(samples: FieldSampleSet, include_bz_x_gradient: bool = False) -> float:
    """Homogeneity functional in T^2 m.

    Sums the full gradients of B_x and B_y and the y, z derivatives of B_z;
    dB_z/dx (along the beam) is left out unless ``include_bz_x_gradient``.
    """
    g = _require_grad(samples)
    dens = np.sum(g[:, 0, :] ** 2 + g[:, 1, :] ** 2, axis=1) + g[:, 2, 1] ** 2 + g[:, 2, 2] ** 2
    if include_bz_x_gradient:
        dens = dens + g[:, 2, 0] ** 2
    return float(np.sum(samples.weights * dens))


def field_energy(samples: FieldSampleSet) -> float:
    return float(np.sum(samples.weights * np.sum(samples.B ** 2, axis=1)))


def relative_error(samples: FieldSampleSet, include_bz_x_gradient: bool = False) -> float:
    """J divided by the weighted sum of |B|^2 (dimensionless up to the m^-2 of the gradient)."""
    e = field_energy(samples)
    if e <= 0.0:
        raise MetricError("relative error undefined for an identically zero field")
    return functional_j(samples, include_bz_x_gradient) / e


def rotation_angle(theta: float, v: float = DEFAULT_VELOCITY, signed: bool = False) -> float:
    """Larmor angle (rad) for an action ``theta`` in mT mm at speed ``v`` in m/s.

    With ``signed=True`` the sign of the neutron moment is kept.
    """
    if not v > 0:
        raise MetricError(f"velocity must be positive, got {v}")
    mu = MU_N if signed else abs(MU_N)
    return 2.0 * mu * (theta / T_M_TO_MT_MM) / (HBAR * v)


@dataclass(frozen=True)
class ActionReport:
    theta: float  # mT mm
    J: float  # T^2 m
    delta_e: float
    center_Bz: float  # mT

    CSV_HEADER = ("theta_mT_mm", "J", "delta_e", "center_Bz_mT")

    def csv_row(self) -> str:
        return ",".join(f"{v:.12g}" for v in (self.theta, self.J, self.delta_e, self.center_Bz))

    def to_dict(self) -> dict:
        return asdict(self)


def report(samples: FieldSampleSet, a: float, center_Bz: float,
           include_bz_x_gradient: bool = False) -> ActionReport:
    """Bundle the metrics of a gradient-carrying sample set; ``center_Bz`` in T."""
    J = functional_j(samples, include_bz_x_gradient)
    e = field_energy(samples)
    de = J / e if e > 0 else 0.0
    return ActionReport(action(samples, a), J, de, center_Bz * 1e3)
