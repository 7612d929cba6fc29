import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maglarmor.geometry import MagnetAssembly, build_design_grid, build_field_box
from maglarmor.magnetostatics import field_on_samples
from maglarmor.metrics import action, field_energy, functional_j
from maglarmor.optimize import (DEFAULT_GAP, OptimizationError, OptimizeConfig, _objective,
                                angles_to_dirs, assembly_theta, binarize, build_linear_model,
                                calibrate_gap, calibrate_remanence, dirs_to_angles, linear_fit,
                                optimize_directions, optimize_topology, read_assembly_csv,
                                remanence_of, scan, write_assembly_csv, write_history_csv)

MM = 1e-3
SMALL_BOX = dict(n=(5, 5, 11))


@pytest.fixture(scope="module")
def small_box():
    return build_field_box(**SMALL_BOX)


@pytest.fixture(scope="module")
def small_grid():
    return build_design_grid(2 * MM, extent=(12 * MM, 16 * MM, 16 * MM))


def _random_assembly(seed, n=6):
    # distinct cells of a 2 mm lattice above and below the box, so voxels never overlap
    rng = np.random.default_rng(seed)
    cells = np.array([(i, j, k) for i in range(-3, 3) for j in range(-3, 3) for k in (-5, -4, 3, 4)])
    c = (cells[rng.choice(len(cells), n, replace=False)] + 0.5) * 2 * MM
    return MagnetAssembly(c, np.full((n, 3), 0.8 * MM), rng.normal(size=(n, 3)) * 0.05)


class TestLinearModel:
    def test_matches_direct_field(self, small_box):
        asm = _random_assembly(1)
        n = len(asm)
        model = build_linear_model(asm.centers, asm.half_extents, np.ones((n, 3)),
                                   np.arange(n), n, small_box)
        u = asm.magnetization.ravel()
        s = field_on_samples(asm, small_box, True)
        np.testing.assert_allclose(model.Z @ u, s.B[:, 2], rtol=1e-9, atol=1e-12 * np.abs(s.B).max())
        assert model.theta(u) == pytest.approx(action(s, small_box.a), rel=1e-9)
        assert model.J(u) == pytest.approx(functional_j(s), rel=1e-8)
        assert model.energy(u) == pytest.approx(field_energy(s), rel=1e-9)

    def test_symmetric_folding(self, small_grid, small_box):
        from maglarmor.optimize import _orbits
        group, colsign, G = _orbits(small_grid)
        c = small_grid.centers()
        h = np.full_like(c, small_grid.voxel_size / 2)
        u = np.random.default_rng(2).normal(size=3 * G) * 0.05
        full = build_linear_model(c, h, colsign, group, G, small_box, symmetric=False)
        fold = build_linear_model(c, h, colsign, group, G, small_box, symmetric=True)
        assert fold.J(u) == pytest.approx(full.J(u), rel=1e-9)
        assert fold.theta(u) == pytest.approx(full.theta(u), rel=1e-9)

    def test_objective_gradient(self, small_box):
        asm = _random_assembly(3)
        n = len(asm)
        model = build_linear_model(asm.centers, asm.half_extents, np.ones((n, 3)),
                                   np.arange(n), n, small_box)
        u0 = asm.magnetization.ravel()
        lam = model.J(u0) / 10.0
        f = _objective(model, lam, 0.5 * model.theta(u0))
        rng = np.random.default_rng(4)
        for _ in range(10):
            u = u0 + rng.normal(size=u0.size) * 0.01
            _, g = f(u)
            d = rng.normal(size=u.size)
            d /= np.linalg.norm(d)
            eps = 1e-7
            fd = (f(u + eps * d)[0] - f(u - eps * d)[0]) / (2 * eps)
            assert fd == pytest.approx(g @ d, rel=1e-5, abs=1e-5 * np.linalg.norm(g))


class TestSpherical:
    @settings(max_examples=50, deadline=None)
    @given(st.floats(0.05, 3.09), st.floats(-3.1, 3.1))
    def test_round_trip(self, th, ph):
        t = np.array([[th, ph]])
        np.testing.assert_allclose(dirs_to_angles(angles_to_dirs(t)), t, atol=1e-12)
        assert np.linalg.norm(angles_to_dirs(t)) == pytest.approx(1.0, abs=1e-15)


class TestBinarize:
    def test_example(self):
        m = np.array([[0, 0, 0.05], [0, 0.01, 0], [0.03, 0.04, 0.0]])
        keep, mb = binarize(m, 0.061, 0.5)
        assert keep.tolist() == [True, False, True]
        np.testing.assert_allclose(np.linalg.norm(mb[keep], axis=1), 0.061)
        np.testing.assert_array_equal(mb[1], 0)
        np.testing.assert_allclose(mb[2] / 0.061, [0.6, 0.8, 0])

    def test_empty(self):
        with pytest.raises(OptimizationError, match="empty design"):
            binarize(np.zeros((4, 3)), 0.061)

    def test_zero_weight_zero_start(self, small_grid, small_box):
        # with lam = 0 the origin is a minimizer of J, so nothing survives thresholding
        cfg = OptimizeConfig(theta_weight=0.0, max_iters=20, repair_iters=0)
        init = np.zeros((int(small_grid.active.sum()), 3))
        with pytest.raises(OptimizationError, match="empty design"):
            optimize_topology(small_grid, 61e-3, small_box, cfg, initial=init)


class TestConfig:
    def test_defaults(self):
        assert OptimizeConfig().penalty_balance == 1.0
        assert OptimizeConfig(mode="directions").penalty_balance == 100.0

    @pytest.mark.parametrize("kw", [dict(theta_target=0), dict(max_iters=0), dict(mode="x"),
                                    dict(theta_weight=-1.0), dict(penalty_balance=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            OptimizeConfig(**kw)


class TestDirections:
    def test_single_segment_stays_on_axis(self, small_box):
        # one group: a mirror-symmetric pair above and below the box, magnetized +z
        asm = MagnetAssembly([[0, 0, 7 * MM], [0, 0, -7 * MM]], [[3 * MM, 3 * MM, MM]] * 2,
                             [[0, 0, 0.05]] * 2, halves=[1, 2], groups=[0, 0])
        r = optimize_directions(asm, 0.05, small_box,
                                OptimizeConfig(mode="directions", max_iters=50, gap=0.0))
        np.testing.assert_allclose(r.variables[0], [0, 0, 1], atol=1e-6)

    def test_decreases_objective(self, small_box):
        asm = _random_assembly(5)
        asm = MagnetAssembly(asm.centers, asm.half_extents, asm.magnetization,
                             halves=np.where(asm.centers[:, 2] > 0, 1, 2))
        r = optimize_directions(asm, 0.05, small_box,
                                OptimizeConfig(mode="directions", max_iters=100, gap=0.0))
        F = [h[0] for h in r.history]
        assert F[-1] <= F[0]
        assert np.all(np.diff(F) <= 1e-12 * F[0])
        np.testing.assert_allclose(np.linalg.norm(r.assembly.magnetization, axis=1), 0.05)

    def test_empty(self, small_box):
        with pytest.raises(OptimizationError):
            optimize_directions(MagnetAssembly.empty(), 0.05, small_box)


class TestTopologyReference:
    def test_history_monotone(self, topology_result):
        F = np.array([h[0] for h in topology_result.history])
        k = topology_result.binarized_at
        assert 0 < k < len(F)
        assert np.all(np.diff(F[:k]) <= 1e-12 * F[0])
        assert np.all(np.diff(F[k:]) <= 1e-12 * F[k])

    def test_morphology(self, topology_result):
        asm = topology_result.assembly
        assert asm.mirror_axes() == (0, 1, 2)
        np.testing.assert_allclose(np.linalg.norm(asm.magnetization, axis=1), 61e-3, rtol=1e-12)
        # no material inside the beam corridor
        assert np.all(np.max(np.abs(asm.centers[:, 1:]) - asm.half_extents[:, 1:], axis=1)
                      >= 3.5 * MM)
        assert len(asm) % 8 == 0

    def test_binarization_stability(self, topology_result):
        # after thresholding and repair the action stays within 2% of the target
        assert topology_result.report.theta == pytest.approx(35.0, rel=0.02)

    def test_variables_symmetric(self, topology_result):
        assert topology_result.variables.shape[1] == 3
        assert np.all(np.linalg.norm(topology_result.variables, axis=1) <= 61e-3 * (1 + 1e-12))


class TestCalibration:
    def test_remanence_example(self, topology_result, box):
        asm = topology_result.assembly
        br = calibrate_remanence(asm, DEFAULT_GAP, 35.0, box)
        cal = asm.scaled(br / remanence_of(asm))
        assert assembly_theta(cal, box, DEFAULT_GAP) == pytest.approx(35.0, rel=1e-9)

    def test_gap_round_trip(self, topology_calibrated, box):
        asm, _ = topology_calibrated
        for target in (30.0, 40.0):
            dz = calibrate_gap(asm, target, (0.0, 3.5e-3), box)
            assert assembly_theta(asm, box, dz) == pytest.approx(target, abs=0.01)
        assert calibrate_gap(asm, 35.0, (0.0, 3.5e-3), box) == pytest.approx(DEFAULT_GAP, abs=2e-6)

    def test_gap_out_of_range(self, topology_calibrated, box):
        asm, _ = topology_calibrated
        with pytest.raises(OptimizationError, match="outside attainable range"):
            calibrate_gap(asm, 500.0, (0.0, 3.5e-3), box)

    def test_no_action(self, box):
        asm = MagnetAssembly([[0, 0, 8 * MM]], [[MM] * 3], [[0.1, 0, 0]])
        asm0 = asm.scaled(0.0)
        with pytest.raises(OptimizationError):
            calibrate_remanence(asm0, 0.0, 35.0, box)

    def test_remanence_linear(self, topology_calibrated, small_box):
        asm, br = topology_calibrated
        r = scan(asm, "remanence", np.linspace(0.5, 1.5, 4) * br, small_box)
        assert abs(1 - r.fit.r2) <= 1e-12 and r.fit.intercept == pytest.approx(0, abs=1e-9)


def test_linear_fit_exact():
    f = linear_fit([0, 1, 2, 3], [1, 3, 5, 7])
    assert f.slope == pytest.approx(2) and f.intercept == pytest.approx(1)
    assert f.r2 == pytest.approx(1.0) and f.max_residual < 1e-12


def test_scan_validation(small_box):
    with pytest.raises(ValueError):
        scan(MagnetAssembly.empty(), "gap", [], small_box)
    with pytest.raises(ValueError):
        scan(MagnetAssembly.empty(), "gap", [2e-3, 1e-3], small_box)
    with pytest.raises(ValueError):
        scan(MagnetAssembly.empty(), "angle", [1.0], small_box)


def test_assembly_csv_round_trip(tmp_path, topology_result):
    asm = topology_result.assembly
    p = tmp_path / "a.csv"
    write_assembly_csv(p, asm)
    back = read_assembly_csv(p, gap=asm.gap)
    np.testing.assert_allclose(back.with_gap(asm.gap).centers, asm.centers, atol=1e-15)
    np.testing.assert_allclose(back.half_extents, asm.half_extents, rtol=1e-11)
    np.testing.assert_allclose(back.magnetization, asm.magnetization, rtol=1e-11, atol=1e-15)
    np.testing.assert_array_equal(back.halves, asm.halves)


def test_assembly_csv_bad_header(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        read_assembly_csv(p)


def test_history_csv(tmp_path, topology_result):
    p = tmp_path / "h.csv"
    write_history_csv(p, topology_result)
    lines = p.read_text().splitlines()
    assert lines[0] == "iter,F,theta,delta_e"
    assert len(lines) == len(topology_result.history) + 1
