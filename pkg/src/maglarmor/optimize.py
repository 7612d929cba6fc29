"""Direction and topology optimization of magnet layouts, calibration and scans.

Both procedures minimise ``F = J + lam * (Theta - Theta_target)**2``.  Because
B is linear in the magnetization, J and the field energy are quadratic forms
and Theta is a weighted l1 norm of a linear map; all three are assembled once
from the cuboid kernel and every objective/gradient evaluation afterwards is
a few dense matrix-vector products.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import kernels
from .geometry import (MIRROR_T, DesignGrid, FieldBox, GeometryError, Half, MagnetAssembly)
from .magnetostatics import (EDGE_EPS, FD_STEP, _FD_COEFFS, _FD_OFFSETS, RectCoil,
                             assembly_field, coil_field, field_on_samples)
from .metrics import T_M_TO_MT_MM, ActionReport, report

DEFAULT_GAP = 2.25e-3


class OptimizationError(RuntimeError):
    pass


@dataclass
class OptimizeConfig:
    """Optimizer settings.

    ``theta_weight`` is the penalty weight lam in T^2 m per (mT mm)^2.  When
    None it is set so that ``penalty_balance * (Theta0 - target)^2 * lam``
    equals J at the initial layout.  ``penalty_balance`` defaults to 1 for
    topology runs and 100 for direction runs.
    """
    theta_target: float = 35.0
    theta_weight: Optional[float] = None
    penalty_balance: Optional[float] = None
    max_iters: int = 500
    grad_tol: float = 1e-6
    mode: str = "topology"
    seed_layout: str = "default"
    gap: float = DEFAULT_GAP
    include_bz_x_gradient: bool = False
    binarize_threshold: float = 0.5
    repair_iters: int = 500
    n_threads: Optional[int] = None

    def __post_init__(self):
        if not self.theta_target > 0:
            raise ValueError("theta_target must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.mode not in ("directions", "topology"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.theta_weight is not None and self.theta_weight < 0:
            raise ValueError("theta_weight must be >= 0")
        if self.penalty_balance is None:
            self.penalty_balance = 1.0 if self.mode == "topology" else 100.0
        if not self.penalty_balance > 0:
            raise ValueError("penalty_balance must be positive")


@dataclass
class DesignResult:
    assembly: MagnetAssembly
    report: ActionReport
    history: List[tuple]
    converged: bool
    theta_weight: float
    n_iters: int
    variables: np.ndarray = field(repr=False)
    remanence: float = 0.0
    binarized_at: Optional[int] = None

    def history_rows(self):
        return [(k, f, t, d) for k, (f, t, d) in enumerate(self.history)]


# -- linear field model ---------------------------------------------------------

@dataclass
class LinearFieldModel:
    """Field-box metrics as functions of group magnetization vectors ``u`` (T).

    ``u`` has shape (G, 3) flattened to 3G.  ``Z @ u`` gives B_z at the nodes,
    ``u @ QJ @ u`` the homogeneity functional and ``u @ QB @ u`` the field energy.
    """
    weights: np.ndarray
    Z: np.ndarray
    QJ: np.ndarray
    QB: np.ndarray
    a: float
    center: np.ndarray

    @property
    def n(self) -> int:
        return self.QJ.shape[0]

    def theta(self, u) -> float:
        return float(np.sum(self.weights * np.abs(self.Z @ u)) / self.a ** 2 * T_M_TO_MT_MM)

    def theta_grad(self, u) -> np.ndarray:
        s = np.sign(self.Z @ u)
        return (self.weights * s) @ self.Z / self.a ** 2 * T_M_TO_MT_MM

    def J(self, u) -> float:
        return float(u @ self.QJ @ u)

    def energy(self, u) -> float:
        return float(u @ self.QB @ u)

    def delta_e(self, u) -> float:
        e = self.energy(u)
        return self.J(u) / e if e > 0 else 0.0

    def restrict(self, groups) -> "LinearFieldModel":
        """Model over a subset of groups (the others held at zero)."""
        cols = (3 * np.asarray(groups)[:, None] + np.arange(3)).ravel()
        return LinearFieldModel(self.weights, self.Z[:, cols], self.QJ[np.ix_(cols, cols)],
                                self.QB[np.ix_(cols, cols)], self.a, self.center[cols])


def build_linear_model(centers, half, colsign, group, n_groups, box: FieldBox,
                       symmetric: bool = False, include_bz_x_gradient: bool = False,
                       h: float = FD_STEP, n_threads=None, chunk: int = 192) -> LinearFieldModel:
    """Assemble the quadratic forms from the cuboid tensor kernel.

    With ``symmetric=True`` the voxel set must be closed under the three
    mirrors (with ``colsign`` carrying the image parities); only octant nodes
    are evaluated, with weights folded by multiplicity.
    """
    nt = kernels.default_threads() if n_threads is None else n_threads
    if symmetric:
        nodes, w = box.octant()
    else:
        nodes, w = np.asarray(box.points), np.asarray(box.weights)
    n = 3 * n_groups
    QJ = np.zeros((n, n))
    QB = np.zeros((n, n))
    Z = np.empty((len(nodes), n))
    terms = [(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2), (2, 1), (2, 2)]
    if include_bz_x_gradient:
        terms.append((2, 0))
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    half = np.ascontiguousarray(half, dtype=np.float64)
    colsign = np.ascontiguousarray(colsign, dtype=np.float64)
    group = np.ascontiguousarray(group, dtype=np.int64)
    for s in range(0, len(nodes), chunk):
        p = nodes[s:s + chunk]
        ww = w[s:s + chunk]
        m = len(p)
        st = np.repeat(p[:, None, None, :], 3, axis=1).repeat(4, axis=2)
        for j in range(3):
            st[:, j, :, j] += _FD_OFFSETS * h
        pts = np.concatenate([p, st.reshape(-1, 3)])
        A = kernels.cuboid_tensor_groups(pts, centers, half, colsign, group, n_groups, EDGE_EPS, nt)
        # rows[p, i, (g, j)]
        A = A.transpose(0, 2, 1, 3).reshape(len(pts), 3, n)
        Bc = A[:m]
        Z[s:s + m] = Bc[:, 2, :]
        sq = np.sqrt(ww)
        Rb = (Bc * sq[:, None, None]).reshape(-1, n)
        QB += Rb.T @ Rb
        As = A[m:].reshape(m, 3, 4, 3, n)  # (node, axis j, offset, component i, n)
        G = np.einsum("mjoin,o->mijn", As, _FD_COEFFS) / h
        R = np.stack([G[:, i, j, :] for i, j in terms], axis=1) * sq[:, None, None]
        R = R.reshape(-1, n)
        QJ += R.T @ R
    QJ = 0.5 * (QJ + QJ.T)
    QB = 0.5 * (QB + QB.T)
    ci = int(np.argmin(np.sum(nodes ** 2, axis=1)))
    return LinearFieldModel(w, Z, QJ, QB, box.a, Z[ci].copy())


# -- spectral projected gradient ---------------------------------------------------

def _spg(fg: Callable, x0: np.ndarray, project: Callable, max_iters: int, tol: float,
         callback: Callable):
    """Projected gradient with Barzilai-Borwein steps and monotone Armijo backtracking."""
    x = project(x0)
    f, g = fg(x)
    callback(x, f)
    pg0 = np.linalg.norm(project(x - g) - x)
    if pg0 == 0.0:
        return x, True, 0
    alpha = 1.0 / max(np.max(np.abs(g)), 1e-300)
    for it in range(1, max_iters + 1):
        pg = np.linalg.norm(project(x - g) - x)
        if pg <= tol * pg0:
            return x, True, it - 1
        d = project(x - alpha * g) - x
        gd = float(g @ d)
        if gd >= 0:
            d = project(x - g) - x
            gd = float(g @ d)
            if gd >= 0:
                return x, True, it - 1
        t = 1.0
        while True:
            xn = x + t * d
            fn, gn = fg(xn)
            if fn <= f + 1e-4 * t * gd or t < 1e-12:
                break
            t *= 0.5
        if fn > f:
            return x, False, it
        s = xn - x
        y = gn - g
        sy = float(s @ y)
        alpha = float(s @ s) / sy if sy > 0 else 1e3 * alpha
        alpha = min(max(alpha, 1e-12), 1e12)
        small = abs(f - fn) <= 1e-15 * max(abs(f), 1e-300)
        x, f, g = xn, fn, gn
        callback(x, f)
        if small and np.linalg.norm(s) <= 1e-14 * max(np.linalg.norm(x), 1.0):
            return x, True, it
    pg = np.linalg.norm(project(x - g) - x)
    return x, bool(pg <= tol * pg0), max_iters


def _auto_weight(model: LinearFieldModel, u0, cfg: OptimizeConfig) -> float:
    if cfg.theta_weight is not None:
        return float(cfg.theta_weight)
    dev = model.theta(u0) - cfg.theta_target
    j0 = model.J(u0)
    if dev == 0.0 or j0 == 0.0:
        return 1.0 if j0 == 0.0 else j0 / cfg.theta_target ** 2
    return cfg.penalty_balance * j0 / dev ** 2


def _objective(model: LinearFieldModel, lam: float, target: float):
    def f_u(u):
        QJu = model.QJ @ u
        th = model.theta(u)
        f = float(u @ QJu) + lam * (th - target) ** 2
        g = 2.0 * QJu + 2.0 * lam * (th - target) * model.theta_grad(u)
        return f, g
    return f_u


def _final_report(asm: MagnetAssembly, box: FieldBox, cfg: OptimizeConfig) -> ActionReport:
    s = field_on_samples(asm, box, True, n_threads=cfg.n_threads)
    bz0 = assembly_field(asm, np.zeros(3))[2] if len(asm) else 0.0
    return report(s, box.a, bz0, cfg.include_bz_x_gradient)


# -- direction optimization --------------------------------------------------------

def angles_to_dirs(t: np.ndarray) -> np.ndarray:
    """Spherical angles (theta, phi) per row, polar axis along x, to unit vectors."""
    th, ph = t[:, 0], t[:, 1]
    st = np.sin(th)
    return np.stack([np.cos(th), st * np.cos(ph), st * np.sin(ph)], axis=1)


def dirs_to_angles(d: np.ndarray) -> np.ndarray:
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    return np.stack([np.arccos(np.clip(d[:, 0], -1, 1)), np.arctan2(d[:, 2], d[:, 1])], axis=1)


def _angle_jac(t):
    th, ph = t[:, 0], t[:, 1]
    dth = np.stack([-np.sin(th), np.cos(th) * np.cos(ph), np.cos(th) * np.sin(ph)], axis=1)
    dph = np.stack([np.zeros_like(th), -np.sin(th) * np.sin(ph), np.sin(th) * np.cos(ph)], axis=1)
    return dth, dph


def _direction_search(model: LinearFieldModel, B_r: float, dirs0: np.ndarray, lam: float,
                      target: float, max_iters: int, tol: float, history: list):
    """SPG over spherical angles, one unit direction per model group."""
    G = len(dirs0)
    fu = _objective(model, lam, target)
    t0 = dirs_to_angles(dirs0)
    scale = max(fu((B_r * angles_to_dirs(t0)).ravel())[0], 1e-300)

    def fg(x):
        t = x.reshape(G, 2)
        f, gu = fu((B_r * angles_to_dirs(t)).ravel())
        gu = gu.reshape(G, 3) * B_r
        dth, dph = _angle_jac(t)
        g = np.stack([np.sum(gu * dth, axis=1), np.sum(gu * dph, axis=1)], axis=1)
        return f / scale, g.ravel() / scale

    def cb(x, f):
        u = (B_r * angles_to_dirs(x.reshape(G, 2))).ravel()
        history.append((f * scale, model.theta(u), model.delta_e(u)))

    x, conv, it = _spg(fg, t0.ravel(), lambda v: v, max_iters, tol, cb)
    return angles_to_dirs(x.reshape(G, 2)), conv, it


def optimize_directions(segments: MagnetAssembly, B_r: float, box: FieldBox,
                        cfg: OptimizeConfig = None, initial_dirs=None) -> DesignResult:
    """Optimise one remanence direction per voxel group at fixed magnitude ``B_r``.

    ``segments`` supplies the voxel geometry and the group labels; its
    current magnetization directions (per group) are the starting point
    unless ``initial_dirs`` is given.
    """
    cfg = cfg or OptimizeConfig(mode="directions")
    if len(segments) == 0:
        raise OptimizationError("empty segment list")
    asm = segments.with_gap(cfg.gap)
    G = asm.n_groups
    if initial_dirs is None:
        initial_dirs = np.zeros((G, 3))
        np.add.at(initial_dirs, asm.groups, asm.magnetization)
    initial_dirs = np.asarray(initial_dirs, dtype=np.float64).reshape(G, 3)
    if np.any(np.linalg.norm(initial_dirs, axis=1) == 0):
        raise OptimizationError("every segment needs a nonzero initial direction")
    model = build_linear_model(asm.centers, asm.half_extents, np.ones((len(asm), 3)),
                               asm.groups, G, box, symmetric=False,
                               include_bz_x_gradient=cfg.include_bz_x_gradient,
                               n_threads=cfg.n_threads)
    d0 = initial_dirs / np.linalg.norm(initial_dirs, axis=1, keepdims=True)
    lam = _auto_weight(model, (B_r * d0).ravel(), cfg)
    history = []
    dirs, conv, it = _direction_search(model, B_r, d0, lam, cfg.theta_target,
                                       cfg.max_iters, cfg.grad_tol, history)
    final = asm.with_magnetization(B_r * dirs[asm.groups])
    return DesignResult(final, _final_report(final, box, cfg), history, conv, lam, it, dirs, B_r)


# -- topology optimization ---------------------------------------------------------

def _orbits(grid: DesignGrid):
    """Group active voxels into mirror orbits of eight; returns (group, colsign, n_groups)."""
    c = grid.centers()
    key = np.round(np.abs(c) / (grid.voxel_size * 1e-6)).astype(np.int64)
    _, group = np.unique(key, axis=0, return_inverse=True)
    group = group.reshape(-1)
    colsign = np.ones_like(c)
    for k in range(3):
        neg = c[:, k] < 0
        colsign[neg] *= MIRROR_T[k]
    counts = np.bincount(group)
    if np.any(counts != 8):
        raise GeometryError("design grid is not mirror symmetric with voxels off the planes")
    return group, colsign, int(group.max()) + 1


def _ball_project(x):
    v = x.reshape(-1, 3)
    n = np.linalg.norm(v, axis=1, keepdims=True)
    return (v / np.maximum(n, 1.0)).ravel()


def binarize(m: np.ndarray, B_r_max: float, threshold: float = 0.5):
    """Keep voxels with |m| >= threshold * B_r_max at full remanence; drop the rest."""
    n = np.linalg.norm(m, axis=1)
    keep = n >= threshold * B_r_max
    if not np.any(keep):
        raise OptimizationError("empty design: every voxel fell below the binarization threshold")
    mb = np.zeros_like(m)
    mb[keep] = B_r_max * m[keep] / n[keep, None]
    return keep, mb


def optimize_topology(grid: DesignGrid, B_r_max: float, box: FieldBox,
                      cfg: OptimizeConfig = None, initial=None) -> DesignResult:
    """Free per-voxel magnetization in the ball |m| <= B_r_max, then binarize.

    The layout is restricted to the three-mirror-symmetric subspace: one
    vector per orbit of eight mirrored voxels.  After thresholding, the
    directions of the kept voxels are re-optimised at fixed magnitude
    ``B_r_max`` (``cfg.repair_iters`` iterations, 0 disables); history rows
    from index ``DesignResult.binarized_at`` on belong to that phase.
    """
    cfg = cfg or OptimizeConfig()
    group, colsign, G = _orbits(grid)
    c = grid.centers()
    hv = grid.halves()
    shift = MagnetAssembly._shift(hv, cfg.gap)
    half = np.full_like(c, grid.voxel_size / 2)
    model = build_linear_model(c + shift, half, colsign, group, G, box, symmetric=True,
                               include_bz_x_gradient=cfg.include_bz_x_gradient,
                               n_threads=cfg.n_threads)
    rep = np.zeros(G, dtype=np.int64)
    rep[group] = np.arange(len(group))
    if initial is None:
        x0 = np.tile([0.0, 0.0, 0.1], G)
    else:
        init = np.asarray(initial, dtype=np.float64).reshape(-1, 3)
        if len(init) == len(group):
            init = init[rep] * colsign[rep]
        x0 = _ball_project((init / B_r_max).ravel())
    u0 = B_r_max * x0
    lam = _auto_weight(model, u0, cfg)
    fu = _objective(model, lam, cfg.theta_target)
    f0 = fu(u0)[0]
    scale = f0 if f0 > 0 else 1.0

    def fg(x):
        f, g = fu(B_r_max * x)
        return f / scale, g * (B_r_max / scale)

    history = []

    def cb(x, f):
        u = B_r_max * x
        history.append((f * scale, model.theta(u), model.delta_e(u)))

    x, conv, it = _spg(fg, x0, _ball_project, cfg.max_iters, cfg.grad_tol, cb)
    m_rep = B_r_max * x.reshape(G, 3)
    keep_g, mb_rep = binarize(m_rep, B_r_max, cfg.binarize_threshold)
    binarized_at = len(history)
    if cfg.repair_iters > 0:
        sub = model.restrict(np.flatnonzero(keep_g))
        dirs, conv_r, k = _direction_search(sub, B_r_max, mb_rep[keep_g] / B_r_max, lam,
                                            cfg.theta_target, cfg.repair_iters, cfg.grad_tol,
                                            history)
        mb_rep[keep_g] = B_r_max * dirs
        it += k
    keep = keep_g[group]
    m_full = mb_rep[group] * colsign
    ref = c[keep]
    asm = MagnetAssembly(ref + shift[keep], half[keep], m_full[keep], hv[keep], gap=cfg.gap,
                         groups=group[keep], _reference=ref, check=False)
    res = DesignResult(asm, _final_report(asm, box, cfg), history, conv, lam, it,
                       m_rep[group] * colsign, B_r_max)
    res.binarized_at = binarized_at
    return res


# -- calibration and scans ---------------------------------------------------------

def assembly_theta(assembly: MagnetAssembly, box: FieldBox, dz: Optional[float] = None,
                   n_threads=None) -> float:
    asm = assembly if dz is None else assembly.with_gap(dz)
    s = field_on_samples(asm, box, False, n_threads=n_threads)
    return float(np.sum(s.weights * np.abs(s.B[:, 2])) / box.a ** 2 * T_M_TO_MT_MM)


def remanence_of(assembly: MagnetAssembly) -> float:
    n = np.linalg.norm(assembly.magnetization, axis=1)
    return float(n.max()) if len(n) else 0.0


def calibrate_remanence(assembly: MagnetAssembly, dz: float, theta_target: float,
                        box: FieldBox, n_threads=None) -> float:
    """Remanence (T) that gives ``theta_target`` at gap ``dz``; exact by linearity."""
    br = remanence_of(assembly)
    th = assembly_theta(assembly, box, dz, n_threads)
    if th == 0.0 or br == 0.0:
        raise OptimizationError("assembly produces no action; cannot calibrate remanence")
    br_new = br * theta_target / th
    check = assembly_theta(assembly.scaled(br_new / br), box, dz, n_threads)
    if abs(check - theta_target) > 1e-9 * theta_target:
        raise OptimizationError(f"remanence calibration check failed: {check} vs {theta_target}")
    return br_new


def calibrate_gap(assembly: MagnetAssembly, theta_target: float, dz_range: Sequence[float],
                  box: FieldBox, tol: float = 0.01, n_threads=None) -> float:
    """Bisect for the gap (m) whose action is within ``tol`` mT mm of the target."""
    lo, hi = float(dz_range[0]), float(dz_range[1])
    if not (0 <= lo < hi):
        raise ValueError("dz_range must satisfy 0 <= lo < hi")
    probe = np.linspace(lo, hi, 5)
    th = np.array([assembly_theta(assembly, box, d, n_threads) for d in probe])
    if not np.all(np.diff(th) < 0):
        raise OptimizationError(f"action is not strictly decreasing on the gap range: {th}")
    if not (th[-1] - tol <= theta_target <= th[0] + tol):
        raise OptimizationError(
            f"target {theta_target} mT mm outside attainable range "
            f"[{th[-1]:.4f}, {th[0]:.4f}] mT mm for gaps {lo * 1e3:g}-{hi * 1e3:g} mm")
    k = int(np.searchsorted(-th, -theta_target))
    k = min(max(k, 1), len(probe) - 1)
    a, b = probe[k - 1], probe[k]
    ta, tb = th[k - 1], th[k]
    for _ in range(200):
        if abs(ta - theta_target) < tol:
            return a
        if abs(tb - theta_target) < tol:
            return b
        mid = 0.5 * (a + b)
        tm = assembly_theta(assembly, box, mid, n_threads)
        if abs(tm - theta_target) < tol:
            return mid
        if tm > theta_target:
            a, ta = mid, tm
        else:
            b, tb = mid, tm
    return 0.5 * (a + b)


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r2: float
    max_residual: float


def linear_fit(x, y) -> LinearFit:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    A = np.column_stack([x, np.ones_like(x)])
    (k, b), *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - (k * x + b)
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(res ** 2)) / ss if ss > 0 else 1.0
    return LinearFit(float(k), float(b), r2, float(np.max(np.abs(res))))


@dataclass
class ScanResult:
    variable: str
    values: np.ndarray
    theta: np.ndarray
    delta_e: np.ndarray
    center_Bz: np.ndarray  # mT
    fit: LinearFit
    quad_center_Bz: Optional[np.ndarray] = None  # polynomial coefficients, highest first

    HEADER = {"gap": "gap_mm", "remanence": "remanence_mT", "current": "current_A"}

    def display_values(self) -> np.ndarray:
        return self.values * (1e3 if self.variable in ("gap", "remanence") else 1.0)

    def linear_residual_ratio(self) -> float:
        span = float(np.ptp(self.theta))
        return self.fit.max_residual / span if span > 0 else 0.0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([self.HEADER[self.variable], "theta_mT_mm", "delta_e", "center_Bz_mT"])
            for row in zip(self.display_values(), self.theta, self.delta_e, self.center_Bz):
                w.writerow([f"{v:.12g}" for v in row])

    def fit_summary(self) -> dict:
        out = {"slope": self.fit.slope, "intercept": self.fit.intercept, "r2": self.fit.r2,
               "max_residual": self.fit.max_residual,
               "residual_over_span": self.linear_residual_ratio()}
        if self.quad_center_Bz is not None:
            out["center_Bz_quadratic"] = [float(c) for c in self.quad_center_Bz]
        return out


def scan(target, variable: str, values: Sequence[float], box: FieldBox,
         include_bz_x_gradient: bool = False, n_threads=None) -> ScanResult:
    """Tabulate Theta, delta_e and centre B_z over a gap, remanence or current sweep.

    ``target`` is a MagnetAssembly (gap and remanence scans, SI values) or a
    list of RectCoil (current scans, amperes).
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        raise ValueError("scan needs at least one value")
    if not np.all(np.isfinite(vals)) or np.any(np.diff(vals) < 0):
        raise ValueError("scan values must be finite and sorted ascending")
    if variable not in ("gap", "remanence", "current"):
        raise ValueError(f"unknown scan variable {variable!r}")
    th, de, bz = [], [], []
    for v in vals:
        if variable == "current":
            coils = [c.with_current(v) for c in target]
            s = field_on_samples(None, box, True, coils=coils)
            c0 = float(coil_field(coils, np.zeros(3))[2])
        else:
            if variable == "gap":
                asm = target.with_gap(v)
            else:
                br = remanence_of(target)
                asm = target.scaled(v / br)
            s = field_on_samples(asm, box, True, n_threads=n_threads)
            c0 = float(assembly_field(asm, np.zeros(3))[2])
        if variable == "current" and v == 0.0:
            r = ActionReport(0.0, 0.0, 0.0, 0.0)
        else:
            r = report(s, box.a, c0, include_bz_x_gradient)
        th.append(r.theta)
        de.append(r.delta_e)
        bz.append(r.center_Bz)
    th, de, bz = np.array(th), np.array(de), np.array(bz)
    x = vals * (1e3 if variable in ("gap", "remanence") else 1.0)
    fit = linear_fit(x, th) if len(x) >= 2 else LinearFit(0.0, float(th[0]), 1.0, 0.0)
    quad = np.polyfit(x, bz, 2) if variable == "gap" and len(x) >= 3 else None
    return ScanResult(variable, vals, th, de, bz, fit, quad)


# -- export -------------------------------------------------------------------

def write_assembly_csv(path, assembly: MagnetAssembly) -> None:
    """Voxel table (mm, mT) of the assembly at whatever gap it currently has."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cx_mm", "cy_mm", "cz_mm", "hx_mm", "hy_mm", "hz_mm",
                    "Mx_mT", "My_mT", "Mz_mT", "half_id"])
        for c, h, m, k in zip(assembly.centers, assembly.half_extents,
                              assembly.magnetization, assembly.halves):
            w.writerow([f"{v:.12g}" for v in (*(c * 1e3), *(h * 1e3), *(m * 1e3))]
                       + [Half(int(k)).name.capitalize()])


def read_assembly_csv(path, gap: float = 0.0) -> MagnetAssembly:
    """Inverse of ``write_assembly_csv``; ``gap`` (m) is the gap the file was written at."""
    names = {h.name.capitalize(): h for h in Half}
    rows = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header is None or header[:9] != ["cx_mm", "cy_mm", "cz_mm", "hx_mm", "hy_mm", "hz_mm",
                                            "Mx_mT", "My_mT", "Mz_mT"]:
            raise ValueError(f"{path}: not an assembly CSV")
        for line in r:
            if line:
                rows.append(line)
    if not rows:
        return MagnetAssembly.empty()
    num = np.array([[float(v) for v in row[:9]] for row in rows]) * 1e-3
    try:
        halves = np.array([names[row[9]] for row in rows], dtype=np.int8)
    except (KeyError, IndexError) as exc:
        raise ValueError(f"{path}: bad half_id {exc}") from None
    c = num[:, :3] - MagnetAssembly._shift(halves, gap)
    return MagnetAssembly(c, num[:, 3:6], num[:, 6:9], halves, gap=0.0)


def write_history_csv(path, result: DesignResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "F", "theta", "delta_e"])
        for k, f, t, d in result.history_rows():
            w.writerow([k, f"{f:.12g}", f"{t:.12g}", f"{d:.12g}"])
