"""Batch front-end: JSON run configs, pipeline commands and CSV artifacts.

Usage::

    maglarmor <command> --config run.json [--out DIR] [--strict] [--threads N]

Commands: field, metrics, optimize, calibrate, scan, polarimeter,
interferometer, validate, export-field-map.  Lengths in the config are mm,
fields mT and currents A; the ``_mm``/``_mT`` key suffix drives the single
conversion to SI at parse time.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import math
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from .geometry import (Cuboid, GeometryError, Half, HalbachLayout, MagnetAssembly,
                       RingSector, _voxelize_arrays, build_design_grid, build_field_box,
                       build_halbach, halbach_directions)
from .magnetostatics import (FieldError, FieldSampleSet, assembly_field, check_clearance, coil_field,
                             field_on_samples, helmholtz_pair, write_field_map)
from .metrics import ActionReport, report
from .neutron import (NeutronError, aperture_rays, beam_dephasing, interferogram_closed_form,
                      interferogram_oracle, polarimeter_intensity, polarimeter_scan,
                      precession_period, ray_rotation_angles, spin_contrast, uniform_field,
                      unwrap_phases)
from .optimize import (OptimizationError, OptimizeConfig, calibrate_gap, calibrate_remanence,
                       optimize_directions, optimize_topology, read_assembly_csv, remanence_of,
                       scan, write_assembly_csv, write_history_csv)

SCHEMA_VERSION = 1
COMMANDS = ("field", "metrics", "optimize", "calibrate", "scan", "polarimeter",
            "interferometer", "validate", "export-field-map")
DESIGNS = ("topology", "halbach", "coil", "uniform", "primitives")
EXPORT_MARGIN = 2e-3

# what each figure-style command reproduces (recorded in the manifest)
FIGURES = {
    "field": "field and gradients on the beam box",
    "metrics": "action, homogeneity functional and relative error of one design",
    "optimize": "optimized magnetization layout and convergence history",
    "calibrate": "remanence and gap calibration to the target action",
    "scan": "action, relative error and centre field versus the scan variable",
    "polarimeter": "polarimeter interference patterns and rotation angle versus gap",
    "interferometer": "interferograms versus phase shifter angle (4 pi spinor symmetry)",
    "export-field-map": "volume field map between the magnets and axial line scan of B_z",
}


class ConfigError(ValueError):
    """Schema violation or unreadable config; maps to exit code 1."""


# -- schema -------------------------------------------------------------------

@dataclass(frozen=True)
class F:
    kind: str  # num | int | str | bool | nums | section | list
    default: Any = None
    length: Optional[int] = None
    choices: Optional[tuple] = None
    minimum: Optional[float] = None
    positive: bool = False
    sub: Optional[dict] = None


_CUBOID = {"type": F("str", choices=("cuboid",)), "center_mm": F("nums", length=3),
           "extents_mm": F("nums", length=3, positive=True),
           "magnetization_mT": F("nums", (0.0, 0.0, 0.0), length=3),
           "half": F("str", "fixed", choices=("top", "bottom", "fixed"))}
_SECTOR = {"type": F("str", choices=("ring_sector",)), "axis": F("str", "x", choices=("x", "y", "z")),
           "r_inner_mm": F("num", minimum=0.0), "r_outer_mm": F("num", positive=True),
           "angle_start_deg": F("num"), "angle_end_deg": F("num"),
           "length_mm": F("num", positive=True), "axial_offset_mm": F("num", 0.0),
           "magnetization_mT": F("nums", (0.0, 0.0, 0.0), length=3),
           "half": F("str", "fixed", choices=("top", "bottom", "fixed"))}

SCHEMA = {
    "schema_version": F("int"),
    "geometry": F("section", sub={
        "design": F("str", choices=DESIGNS),
        "voxel_size_mm": F("num", positive=True),
        "assembly_file": F("str"),
        "field_box": F("section", sub={
            "a_mm": F("num", 7.0, positive=True), "L_mm": F("num", 40.0, positive=True),
            "n": F("nums", (15, 15, 81), length=3)}),
        "topology": F("section", sub={
            "design_extent_mm": F("nums", (20.0, 24.0, 24.0), length=3,
                                  positive=True),
            "clearance_mm": F("num", 1.0, minimum=0.0)}),
        "halbach": F("section", sub={
            "r_inner_mm": F("num", 6.0, positive=True), "r_outer_mm": F("num", 12.0, positive=True),
            "n_sectors": F("int", 10, minimum=1), "n_rows": F("int", 2, minimum=1),
            "length_mm": F("num", 20.0, positive=True), "order": F("int", 2),
            "directions": F("list")}),
        "coil": F("section", sub={
            "width_mm": F("num", 60.0, positive=True), "height_mm": F("num", 60.0, positive=True),
            "separation_mm": F("num", 30.0, positive=True), "turns": F("int", 1, minimum=1)}),
        "uniform": F("section", sub={"B_mT": F("nums", (0.0, 0.0, 1.0), length=3)}),
        "primitives": F("list"),
    }),
    "physics": F("section", sub={
        "remanence_mT": F("num", positive=True),
        "gap_mm": F("num", 2.25, minimum=0.0),
        "velocity_m_s": F("num", 2041.5, positive=True),
        "guide_field_mT": F("num", 1.0, positive=True),
        "aperture_mm": F("nums", (7.0, 7.0), length=2, positive=True),
        "current_A": F("num", 1.0),
    }),
    "task": F("section", sub={
        "output_dir": F("str"),
        "theta_target": F("num", 35.0, positive=True),
        "theta_weight": F("num", minimum=0.0),
        "penalty_balance": F("num", positive=True),
        "max_iters": F("int", 2000, minimum=1),
        "repair_iters": F("int", 1000, minimum=0),
        "grad_tol": F("num", 1e-6, positive=True),
        "include_bz_x_gradient": F("bool", False),
        "binarize_threshold": F("num", 0.5, positive=True),
        "gap_range_mm": F("nums", length=2, minimum=0.0),
        "scan": F("section", sub={
            "variable": F("str", "gap", choices=("gap", "remanence", "current")),
            "values": F("nums"), "start": F("num"), "stop": F("num"), "num": F("int", minimum=1)}),
        "ray_grid": F("nums", (15, 15), length=2),
        "ray_step_mm": F("num", 0.1, positive=True),
        "ray_margin_mm": F("num", 0.0, minimum=0.0),
        "polarimeter": F("section", sub={
            "gaps_mm": F("nums", (1.0, 1.5, 2.0, 2.25, 2.5, 3.0, 3.5)),
            "positions_start_mm": F("num", 0.0), "positions_stop_mm": F("num"),
            "positions_num": F("int", 41, minimum=4)}),
        "interferometer": F("section", sub={
            "alphas_rad": F("nums"), "gaps_mm": F("nums"),
            "contrast": F("num", 1.0, minimum=0.0), "chi_num": F("int", 73, minimum=4),
            "chi_max_rad": F("num", 4 * math.pi, positive=True)}),
        "resolution": F("nums", length=3),
    }),
}

# divisors, not factors: 2.25 / 1000 rounds to the same double as the literal 2.25e-3
_SCALE = {"_mm": 1000.0, "_mT": 1000.0, "_deg": 180 / math.pi}


def _si_name(key: str):
    for suf, s in _SCALE.items():
        if key.endswith(suf):
            return key[: -len(suf)], s
    if key.endswith("_m_s") or key.endswith("_A") or key.endswith("_rad"):
        return key.rsplit("_", 2 if key.endswith("_m_s") else 1)[0], 1.0
    return key, 1.0


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _check_value(f: F, v, path: str):
    if f.kind == "num":
        if not _is_num(v):
            raise ConfigError(f"{path} must be a finite number, got {v!r}")
        vals = [float(v)]
    elif f.kind == "int":
        if not (_is_num(v) and float(v).is_integer()):
            raise ConfigError(f"{path} must be an integer, got {v!r}")
        v = int(v)
        vals = [v]
    elif f.kind == "str":
        if not isinstance(v, str):
            raise ConfigError(f"{path} must be a string")
        if f.choices and v not in f.choices:
            raise ConfigError(f"{path} must be one of {', '.join(f.choices)}; got {v!r}")
        return v
    elif f.kind == "bool":
        if not isinstance(v, bool):
            raise ConfigError(f"{path} must be true or false")
        return v
    elif f.kind == "nums":
        if not isinstance(v, list) or not all(_is_num(x) for x in v):
            raise ConfigError(f"{path} must be a list of numbers")
        if f.length is not None and len(v) != f.length:
            raise ConfigError(f"{path} must have {f.length} entries")
        vals = [float(x) for x in v]
        v = vals
    elif f.kind == "list":
        if not isinstance(v, list):
            raise ConfigError(f"{path} must be a list")
        return v
    else:  # pragma: no cover
        raise AssertionError(f.kind)
    for x in vals:
        if f.minimum is not None and x < f.minimum:
            raise ConfigError(f"{path} must be >= {f.minimum:g}, got {x:g}")
        if f.positive and not x > 0:
            raise ConfigError(f"{path} must be positive, got {x:g}")
    return v


def _parse_section(doc, schema: dict, path: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    for k in doc:
        if k not in schema:
            raise ConfigError(f"unknown key {(path + '.' if path else '') + k!r}")
    out = {}
    for k, f in schema.items():
        p = f"{path}.{k}" if path else k
        if f.kind == "section":
            out[k] = _parse_section(doc.get(k, {}), f.sub, p)
            continue
        if k in doc and doc[k] is not None:
            v = _check_value(f, doc[k], p)
        else:
            v = f.default
        name, s = _si_name(k)
        if v is not None and s != 1.0:
            v = [x / s for x in v] if isinstance(v, (list, tuple)) else v / s
        if isinstance(v, tuple):
            v = list(v)
        out[name] = v
    return out


def _parse_primitives(items, path="geometry.primitives"):
    out = []
    for i, item in enumerate(items):
        p = f"{path}[{i}]"
        if not isinstance(item, dict) or item.get("type") not in ("cuboid", "ring_sector"):
            raise ConfigError(f"{p}.type must be 'cuboid' or 'ring_sector'")
        schema = _CUBOID if item["type"] == "cuboid" else _SECTOR
        for k, f in schema.items():
            if f.default is None and k not in item:
                raise ConfigError(f"{p}.{k} is required")
        out.append(_parse_section(item, schema, p))
    return out


@dataclass
class RunConfig:
    """Parsed config with every quantity in SI units."""
    geometry: dict
    physics: dict
    task: dict
    schema_version: int = SCHEMA_VERSION
    base_dir: Path = field(default_factory=Path.cwd)
    source_bytes: bytes = b""

    @property
    def design(self) -> str:
        return self.geometry["design"]


def parse_config(doc: dict, base_dir=None) -> RunConfig:
    if not isinstance(doc, dict) or not doc:
        raise ConfigError("config is empty")
    if "schema_version" not in doc:
        raise ConfigError("missing key 'schema_version'")
    d = _parse_section(doc, SCHEMA, "")
    if d["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {d['schema_version']}")
    g = d["geometry"]
    if g["design"] is None:
        raise ConfigError("missing key 'geometry.design'")
    n = g["field_box"]["n"]
    if not all(float(x).is_integer() and x >= 2 for x in n):
        raise ConfigError("geometry.field_box.n must be three integers >= 2")
    g["field_box"]["n"] = [int(x) for x in n]
    g["primitives"] = _parse_primitives(g["primitives"] or [])
    if g["design"] == "primitives" and not g["primitives"]:
        raise ConfigError("geometry.primitives must list at least one primitive")
    h = g["halbach"]
    if h["r_inner"] >= h["r_outer"]:
        raise ConfigError("geometry.halbach.r_inner_mm must be below r_outer_mm")
    if h["directions"] is not None:
        dirs = h["directions"]
        if (len(dirs) != h["n_sectors"] * h["n_rows"]
                or not all(isinstance(r, list) and len(r) == 3 and all(map(_is_num, r)) for r in dirs)):
            raise ConfigError("geometry.halbach.directions needs one [x, y, z] per segment")
    t = d["task"]
    for key in ("ray_grid", "resolution"):
        if t[key] is not None and not all(float(x).is_integer() for x in t[key]):
            raise ConfigError(f"task.{key} must hold integers")
    t["ray_grid"] = [int(x) for x in t["ray_grid"]]
    if min(t["ray_grid"]) < 2:
        raise ConfigError("task.ray_grid needs at least 2 rays per axis")
    if t["resolution"] is not None:
        t["resolution"] = [int(x) for x in t["resolution"]]
    gr = t["gap_range"]
    if gr is not None and not gr[0] < gr[1]:
        raise ConfigError("task.gap_range_mm must be increasing")
    return RunConfig(d["geometry"], d["physics"], t, d["schema_version"],
                     Path(base_dir) if base_dir else Path.cwd())


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {str(p)!r}: {exc.strerror or exc}") from None
    if not raw.strip():
        raise ConfigError(f"config file {str(p)!r} is empty")
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config file {str(p)!r} is not valid JSON: {exc}") from None
    cfg = parse_config(doc, p.parent)
    cfg.source_bytes = raw
    return cfg


# -- designs ------------------------------------------------------------------

@dataclass
class Design:
    """Field source built from a config: magnet assembly, coils or a uniform stub."""
    kind: str
    assembly: Optional[MagnetAssembly] = None
    coils: list = field(default_factory=list)
    external: Optional[Callable] = None
    result: Any = None  # DesignResult when an optimization produced it

    def at_gap(self, gap: float) -> "Design":
        if self.assembly is None:
            return self
        return Design(self.kind, self.assembly.with_gap(gap), self.coils, self.external, self.result)

    def source(self):
        if self.assembly is not None:
            return self.assembly
        if self.coils:
            return self.coils
        if self.external is not None:
            return self.external
        return None

    def samples(self, box, with_gradients=True) -> FieldSampleSet:
        return field_on_samples(self.assembly, box, with_gradients, coils=self.coils,
                                external=self.external)

    def field_at(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
        b = np.zeros_like(pts)
        if self.assembly is not None and len(self.assembly):
            b += assembly_field(self.assembly, pts)
        if self.coils:
            b += coil_field(self.coils, pts)
        if self.external is not None:
            b += self.external(pts)
        return b

    def center_Bz(self) -> float:
        return float(self.field_at(np.zeros((1, 3)))[0, 2])


def field_box_of(cfg: RunConfig):
    fb = cfg.geometry["field_box"]
    return build_field_box(fb["a"], fb["L"], tuple(fb["n"]))


def _halbach_layout(cfg: RunConfig) -> HalbachLayout:
    h = cfg.geometry["halbach"]
    vs = cfg.geometry["voxel_size"] or 0.5e-3
    return HalbachLayout(h["r_inner"], h["r_outer"], h["n_sectors"], h["n_rows"], h["length"], vs)


def _halbach_dirs(cfg: RunConfig, layout: HalbachLayout):
    h = cfg.geometry["halbach"]
    if h["directions"] is not None:
        d = np.asarray(h["directions"], dtype=np.float64)
        if np.any(np.linalg.norm(d, axis=1) == 0):
            raise ConfigError("geometry.halbach.directions must be nonzero vectors")
        return d
    return halbach_directions(layout, h["order"])


_HALF = {"top": Half.TOP, "bottom": Half.BOTTOM, "fixed": Half.FIXED}


def _primitive(p: dict):
    if p["type"] == "cuboid":
        return Cuboid(tuple(p["center"]), tuple(p["extents"]))
    return RingSector(p["axis"], p["r_inner"], p["r_outer"], p["angle_start"], p["angle_end"],
                      p["length"], p["axial_offset"])


def _primitives_assembly(cfg: RunConfig) -> MagnetAssembly:
    vs = cfg.geometry["voxel_size"] or 0.5e-3
    cs, hs, ms, hv = [], [], [], []
    for p in cfg.geometry["primitives"]:
        c, h = _voxelize_arrays(_primitive(p), vs)
        cs.append(c)
        hs.append(h)
        ms.append(np.broadcast_to(np.asarray(p["magnetization"]), c.shape))
        hv.append(np.full(len(c), _HALF[p["half"]], dtype=np.int8))
    return MagnetAssembly(np.vstack(cs), np.vstack(hs), np.vstack(ms), np.concatenate(hv))


def optimize_config(cfg: RunConfig, mode: str) -> OptimizeConfig:
    t = cfg.task
    return OptimizeConfig(theta_target=t["theta_target"], theta_weight=t["theta_weight"],
                          penalty_balance=t["penalty_balance"], max_iters=t["max_iters"],
                          grad_tol=t["grad_tol"], mode=mode, gap=cfg.physics["gap"],
                          include_bz_x_gradient=t["include_bz_x_gradient"],
                          binarize_threshold=t["binarize_threshold"],
                          repair_iters=t["repair_iters"])


def _scale_to(asm: MagnetAssembly, remanence: Optional[float]) -> MagnetAssembly:
    if remanence is None or len(asm) == 0:
        return asm
    br = remanence_of(asm)
    return asm if br == 0 else asm.scaled(remanence / br)


def build_design(cfg: RunConfig, optimize: bool = False) -> Design:
    """Assemble the configured field source at the configured gap.

    Topology designs come from ``geometry.assembly_file`` (written by the
    ``optimize`` command at closed gap) or, failing that, from a fresh
    optimization.  ``physics.remanence_mT`` rescales magnet assemblies.
    """
    g, ph = cfg.geometry, cfg.physics
    kind = g["design"]
    gap = ph["gap"]
    br = ph["remanence"]
    if kind == "uniform":
        return Design(kind, external=uniform_field(g["uniform"]["B"]))
    if kind == "coil":
        c = g["coil"]
        return Design(kind, coils=helmholtz_pair(c["width"], c["height"], c["separation"],
                                                 c["turns"], ph["current"]))
    if g["assembly_file"] and not optimize:
        path = cfg.base_dir / g["assembly_file"]
        try:
            asm = read_assembly_csv(path)
        except OSError as exc:
            raise ConfigError(f"cannot read geometry.assembly_file {str(path)!r}: "
                              f"{exc.strerror or exc}") from None
        except ValueError as exc:
            raise ConfigError(f"geometry.assembly_file: {exc}") from None
        return Design(kind, _scale_to(asm, br).with_gap(gap))
    box = field_box_of(cfg)
    if kind == "primitives":
        return Design(kind, _scale_to(_primitives_assembly(cfg), br).with_gap(gap))
    if kind == "halbach":
        layout = _halbach_layout(cfg)
        br = br or 68e-3
        segs = build_halbach(layout, br, _halbach_dirs(cfg, layout))
        if not optimize:
            return Design(kind, segs.with_gap(gap))
        res = optimize_directions(segs, br, box, optimize_config(cfg, "directions"))
        return Design(kind, res.assembly, result=res)
    # topology
    tg = g["topology"]
    grid = build_design_grid(g["voxel_size"] or 2e-3, tuple(tg["design_extent"]), box.a,
                             tg["clearance"])
    res = optimize_topology(grid, br or 61e-3, box, optimize_config(cfg, "topology"))
    return Design(kind, res.assembly, result=res)


# -- outputs ------------------------------------------------------------------

class Outputs:
    """Collects artifact paths for the manifest."""

    def __init__(self, out_dir: Path):
        self.dir = out_dir
        self.files: list = []

    def path(self, name: str) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        self.files.append(p)
        return p

    def table(self, name: str, header, rows) -> Path:
        p = self.path(name)
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        return p

    def manifest(self, command: str, cfg: RunConfig, extra: dict) -> Path:
        files = []
        for p in sorted(set(self.files)):
            if p.exists():
                files.append({"path": p.name, "sha256": _sha256(p.read_bytes()),
                              "bytes": p.stat().st_size})
        doc = {"command": command, "figure": FIGURES.get(command, ""),
               "config_sha256": _sha256(cfg.source_bytes), "schema_version": cfg.schema_version,
               "files": files, "metadata": extra,
               "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")}
        p = self.dir / "manifest.json"
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return p


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _sha256(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def _report(design: Design, box, cfg: RunConfig) -> ActionReport:
    s = design.samples(box, True)
    return report(s, box.a, design.center_Bz(), cfg.task["include_bz_x_gradient"])


def _check_convergence(res, strict: bool, meta: dict):
    if res is None:
        return
    meta["converged"] = bool(res.converged)
    meta["iterations"] = int(res.n_iters)
    if not res.converged:
        msg = f"optimizer did not converge within the iteration budget ({res.n_iters} iterations)"
        if strict:
            raise OptimizationError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)


# -- commands -------------------------------------------------------------------

def cmd_field(cfg, out: Outputs, args, meta):
    d = build_design(cfg)
    s = d.samples(field_box_of(cfg), True)
    write_field_map(out.path("field.csv"), s, True)


def cmd_metrics(cfg, out, args, meta):
    d = build_design(cfg)
    r = _report(d, field_box_of(cfg), cfg)
    out.table("metrics.csv", ActionReport.CSV_HEADER, [(r.theta, r.J, r.delta_e, r.center_Bz)])


def cmd_optimize(cfg, out, args, meta):
    if cfg.design not in ("topology", "halbach"):
        raise ConfigError("optimize needs geometry.design 'topology' or 'halbach'")
    d = build_design(cfg, optimize=True)
    res = d.result
    write_assembly_csv(out.path("assembly.csv"), res.assembly.with_gap(0.0))
    write_history_csv(out.path("history.csv"), res)
    r = res.report
    out.table("metrics.csv", ActionReport.CSV_HEADER, [(r.theta, r.J, r.delta_e, r.center_Bz)])
    meta.update(theta_weight=res.theta_weight, remanence_mT=res.remanence * 1e3,
                gap_mm=round(cfg.physics["gap"] * 1e3, 9), assembly_gap_mm=0.0,
                binarized_at=res.binarized_at)
    _check_convergence(res, args.strict, meta)


def cmd_calibrate(cfg, out, args, meta):
    d = build_design(cfg)
    if d.assembly is None:
        raise ConfigError("calibrate needs a magnet design")
    _check_convergence(d.result, args.strict, meta)
    box = field_box_of(cfg)
    target = cfg.task["theta_target"]
    gap = cfg.physics["gap"]
    br = calibrate_remanence(d.assembly, gap, target, box)
    cal = d.assembly.scaled(br / remanence_of(d.assembly))
    bz = float(assembly_field(cal, np.zeros(3))[2])
    rows = [("remanence_mT", br * 1e3), ("gap_mm", gap * 1e3), ("theta_target", target),
            ("center_Bz_mT", bz * 1e3)]
    gr = cfg.task["gap_range"]
    if gr is not None:
        dz = calibrate_gap(d.assembly, target, gr, box)
        rows.append(("gap_at_current_remanence_mm", dz * 1e3))
    out.table("calibration.csv", ["quantity", "value"], rows)


def _scan_values(cfg, args):
    sc = cfg.task["scan"]
    var = args.variable or sc["variable"]
    if sc["values"] is not None:
        vals = np.asarray(sc["values"], dtype=np.float64)
    elif sc["start"] is not None and sc["stop"] is not None:
        vals = np.linspace(sc["start"], sc["stop"], sc["num"] or 11)
    elif var == "gap":
        vals = np.linspace(1.0, 3.5, 11)
    else:
        raise ConfigError("task.scan needs 'values' or 'start'/'stop'")
    # the scan section is unit-agnostic in the file: mm for gaps, mT for remanence, A for current
    scale = {"gap": 1000.0, "remanence": 1000.0, "current": 1.0}[var]
    return var, vals / scale


def cmd_scan(cfg, out, args, meta):
    var, vals = _scan_values(cfg, args)
    d = build_design(cfg)
    _check_convergence(d.result, args.strict, meta)
    box = field_box_of(cfg)
    if var == "current":
        if not d.coils:
            raise ConfigError("current scans need geometry.design 'coil'")
        target = d.coils
    else:
        if d.assembly is None:
            raise ConfigError(f"{var} scans need a magnet design")
        target = d.assembly
    res = scan(target, var, vals, box, cfg.task["include_bz_x_gradient"])
    res.write_csv(out.path(f"scan_{var}.csv"))
    fs = res.fit_summary()
    q = fs.pop("center_Bz_quadratic", None)
    header = list(fs)
    row = [fs[k] for k in header]
    if q is not None:
        header += ["center_Bz_q2", "center_Bz_q1", "center_Bz_q0"]
        row += q
    out.table(f"scan_{var}_fit.csv", header, [row])
    meta["fit"] = res.fit_summary()


def _rays(cfg):
    t, ph = cfg.task, cfg.physics
    return aperture_rays(tuple(ph["aperture"]), tuple(t["ray_grid"]), ph["velocity"],
                         t["ray_step"], t["ray_margin"], cfg.geometry["field_box"]["L"])


def _alphas(design: Design, cfg, gap):
    return ray_rotation_angles(design.at_gap(gap).source(), _rays(cfg))


def cmd_polarimeter(cfg, out, args, meta):
    d = build_design(cfg)
    _check_convergence(d.result, args.strict, meta)
    ph, pc = cfg.physics, cfg.task["polarimeter"]
    v, B0 = ph["velocity"], ph["guide_field"]
    period = precession_period(B0, v)
    stop = pc["positions_stop"] if pc["positions_stop"] is not None else pc["positions_start"] + 2 * period
    x = np.linspace(pc["positions_start"], stop, pc["positions_num"])
    ref = polarimeter_scan(0.0, B0, v, x)
    ref.write_csv(out.path("polarimeter_reference.csv"), "dc2_position_mm", 1e3)
    out.files.append(out.dir / "polarimeter_reference_fit.csv")
    gaps = pc["gaps"] if d.assembly is not None else [ph["gap"]]
    rows, raw = [], []
    for g in gaps:
        al = _alphas(d, cfg, g)
        ig = polarimeter_scan(al, B0, v, x)
        name = f"polarimeter_gap_{g * 1e3:.4g}mm.csv"
        ig.write_csv(out.path(name), "dc2_position_mm", 1e3)
        out.files.append(out.dir / name.replace(".csv", "_fit.csv"))
        raw.append(math.remainder(ig.fit.phase - ref.fit.phase, 2 * math.pi))
        # no-flip and flipped intensities at the DC2 position of the reference maximum
        i0 = float(polarimeter_intensity(0.0, B0, v, [0.0])[0])
        ipi = float(polarimeter_intensity(al, B0, v, [0.0])[0])
        rows.append([g * 1e3, None, ig.contrast, spin_contrast(i0, ipi), float(np.mean(al))])
    if raw:
        # branch of the first point from the ray integral, then continuation
        m0 = rows[0][4]
        raw[0] += 2 * math.pi * round((m0 - raw[0]) / (2 * math.pi))
    alpha = unwrap_phases(raw)
    for r, a in zip(rows, alpha):
        r[1] = a
    out.table("polarimeter_alpha.csv",
              ["gap_mm", "alpha_rad", "fringe_contrast", "spin_contrast", "mean_ray_alpha_rad"], rows)


def cmd_interferometer(cfg, out, args, meta):
    ic = cfg.task["interferometer"]
    chis = np.linspace(0.0, ic["chi_max"], ic["chi_num"])
    C = ic["contrast"]
    if C > 1:
        raise ConfigError("task.interferometer.contrast must lie in [0, 1]")
    entries = []
    if ic["alphas"] is not None:
        entries = [(None, a, C) for a in ic["alphas"]]
    else:
        d = build_design(cfg)
        _check_convergence(d.result, args.strict, meta)
        gaps = ic["gaps"] if ic["gaps"] is not None else [cfg.physics["gap"]]
        for g in gaps:
            a, cs = phase_and_contrast(d, cfg, g)
            entries.append((g, a, C * cs))
    rows = []
    for k, (g, a, c) in enumerate(entries):
        ig = interferogram_closed_form(a, c, chis)
        orc = interferogram_oracle(a, chis)
        dev = float(np.max(np.abs(orc.intensity - interferogram_closed_form(a, 1.0, chis).intensity)))
        name = f"interferogram_{k:02d}.csv"
        ig.write_csv(out.path(name), "chi_rad")
        out.files.append(out.dir / name.replace(".csv", "_fit.csv"))
        rows.append([k, "" if g is None else g * 1e3, a, c, ig.fit.amplitude, ig.fit.offset,
                     ig.contrast, ig.fit.phase, dev])
    out.table("interferometer_summary.csv",
              ["index", "gap_mm", "alpha_rad", "input_contrast", "amplitude", "offset",
               "contrast", "phase_rad", "oracle_max_dev"], rows)


def phase_and_contrast(design: Design, cfg, gap):
    t, ph = cfg.task, cfg.physics
    src = design.at_gap(gap).source()
    return beam_dephasing(src, tuple(ph["aperture"]), tuple(t["ray_grid"]), ph["velocity"],
                          t["ray_step"], t["ray_margin"])


def export_grid(box_a: float, box_L: float, resolution, margin: float = EXPORT_MARGIN):
    """Regular grid (endpoints included) over the field box grown by ``margin``.

    ``resolution`` is (n_x, n_y, n_z); every count must be at least 2.
    """
    res = [int(r) for r in resolution]
    if len(res) != 3 or min(res) < 2:
        raise ConfigError("resolution too coarse: need at least 2 nodes per axis")
    hx, ht = box_L / 2 + margin, box_a / 2 + margin
    xs = np.linspace(-hx, hx, res[0])
    ys = np.linspace(-ht, ht, res[1])
    zs = np.linspace(-ht, ht, res[2])
    g = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    return g, xs


def cmd_export_field_map(cfg, out, args, meta):
    res = args.resolution or cfg.task["resolution"] or [45, 12, 12]
    fb = cfg.geometry["field_box"]
    pts, xs = export_grid(fb["a"], fb["L"], res)
    d = build_design(cfg)
    _check_convergence(d.result, args.strict, meta)
    B = d.field_at(pts)
    write_field_map(out.path("field_map.csv"),
                    FieldSampleSet(pts, np.zeros(len(pts)), B), False)
    line = np.column_stack([xs, np.zeros_like(xs), np.zeros_like(xs)])
    write_field_map(out.path("field_map_line.csv"),
                    FieldSampleSet(line, np.zeros(len(line)), d.field_at(line)), False)
    meta.update(resolution=[int(r) for r in res], margin_mm=EXPORT_MARGIN * 1e3)


# -- validation -------------------------------------------------------------------

def validate_config(cfg: RunConfig) -> tuple:
    """(errors, warnings) for a parsed config without running any command."""
    errors, warns = [], []
    g = cfg.geometry
    vs = g["voxel_size"]
    for i, p in enumerate(g["primitives"]):
        size = (min(p["extents"]) if p["type"] == "cuboid" else p["r_outer"] - p["r_inner"])
        v = vs or 0.5e-3
        if v > size:
            warns.append(f"geometry.primitives[{i}]: coarse voxelization, voxel_size "
                         f"{v * 1e3:g} mm exceeds the primitive size {size * 1e3:g} mm")
    if g["assembly_file"]:
        path = cfg.base_dir / g["assembly_file"]
        if not path.is_file():
            errors.append(f"geometry.assembly_file: {str(path)!r} not found")
    fb = g["field_box"]
    try:
        box = field_box_of(cfg)
    except GeometryError as exc:
        errors.append(f"geometry.field_box: {exc}")
        return errors, warns
    asm = None
    if warns and g["design"] == "primitives":
        return errors, warns
    try:
        if g["design"] == "topology" and not g["assembly_file"]:
            tg = g["topology"]
            grid = build_design_grid(vs or 2e-3, tuple(tg["design_extent"]), box.a, tg["clearance"])
            asm = grid.to_assembly(gap=cfg.physics["gap"])
            if grid.n_active == 0:
                errors.append("geometry.topology: design domain has no active voxels")
        elif g["design"] in ("halbach", "primitives") or (g["assembly_file"] and not errors):
            asm = build_design(cfg).assembly
    except (GeometryError, ConfigError) as exc:
        errors.append(f"geometry: {exc}")
    if asm is not None and len(asm):
        try:
            check_clearance(asm, box.lo, box.hi)
        except GeometryError as exc:
            warns.append(f"field box intersects design voxels: {exc}")
    if g["design"] == "coil":
        c = g["coil"]
        if c["separation"] / 2 < fb["a"] / 2 or c["width"] / 2 < fb["L"] / 2:
            warns.append("coil wires pass close to or through the field box")
    return errors, warns


# -- entry point -------------------------------------------------------------------

HANDLERS = {"field": cmd_field, "metrics": cmd_metrics, "optimize": cmd_optimize,
            "calibrate": cmd_calibrate, "scan": cmd_scan, "polarimeter": cmd_polarimeter,
            "interferometer": cmd_interferometer, "export-field-map": cmd_export_field_map}


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="maglarmor", description=__doc__.split("\n\n")[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True, help="JSON run config")
    ap.add_argument("--out", help="output directory (default: task.output_dir or ./out)")
    ap.add_argument("--strict", action="store_true", help="non-convergence exits with code 2")
    ap.add_argument("--threads", type=int, help="kernel threads (fallback: MAGLARMOR_THREADS)")
    ap.add_argument("--variable", choices=("gap", "remanence", "current"),
                    help="scan variable (overrides task.scan.variable)")
    ap.add_argument("--resolution", type=int, nargs=3, metavar=("NX", "NY", "NZ"),
                    help="export-field-map grid size")
    return ap


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 1
        os.environ["MAGLARMOR_THREADS"] = str(args.threads)
    try:
        if args.command == "validate":
            try:
                errors, warns = validate_config(load_config(args.config))
            except ConfigError as exc:
                errors, warns = [str(exc)], []
            for e in errors:
                print(f"error: {e}")
            for w in warns:
                print(f"warning: {w}")
            print(f"{len(errors)} errors, {len(warns)} warnings")
            return 1 if errors else 0
        cfg = load_config(args.config)
        out_dir = Path(args.out or cfg.task["output_dir"] or "out")
        out = Outputs(out_dir)
        meta: dict = {}
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", RuntimeWarning)
            HANDLERS[args.command](cfg, out, args, meta)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        out.manifest(args.command, cfg, meta)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except GeometryError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (OptimizationError, FieldError, NeutronError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":  # pragma: no cover
    main()
