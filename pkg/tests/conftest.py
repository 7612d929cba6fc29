import time

import pytest

from maglarmor.geometry import build_design_grid, build_field_box, build_halbach
from maglarmor.optimize import (DEFAULT_GAP, OptimizeConfig, calibrate_remanence,
                                optimize_directions, optimize_topology, remanence_of)

# settings of the reference designs used across the suite
TOPOLOGY_CFG = dict(max_iters=2000, repair_iters=1000)
HALBACH_CFG = dict(mode="directions", max_iters=2000)

_ACCEPTANCE = []


@pytest.fixture(scope="session")
def box():
    return build_field_box()


@pytest.fixture(scope="session")
def topology_result(box):
    t0 = time.perf_counter()
    res = optimize_topology(build_design_grid(), 61e-3, box, OptimizeConfig(**TOPOLOGY_CFG))
    res.elapsed = time.perf_counter() - t0
    return res


@pytest.fixture(scope="session")
def halbach_result(box):
    t0 = time.perf_counter()
    res = optimize_directions(build_halbach(), 68e-3, box, OptimizeConfig(**HALBACH_CFG))
    res.elapsed = time.perf_counter() - t0
    return res


def _calibrated(result, box):
    asm = result.assembly
    br = calibrate_remanence(asm, DEFAULT_GAP, 35.0, box)
    return asm.scaled(br / remanence_of(asm)), br


@pytest.fixture(scope="session")
def topology_calibrated(topology_result, box):
    return _calibrated(topology_result, box)


@pytest.fixture(scope="session")
def halbach_calibrated(halbach_result, box):
    return _calibrated(halbach_result, box)


@pytest.fixture(scope="session")
def acceptance():
    """Record one pass/fail line per acceptance criterion."""
    def record(n, ok, detail):
        _ACCEPTANCE.append((n, bool(ok), detail))
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(_ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
