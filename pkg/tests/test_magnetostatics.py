import csv
import math
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from maglarmor import _kernels_py, kernels
from maglarmor.geometry import GeometryError, MagnetAssembly, VoxelMagnet, build_field_box
from maglarmor.magnetostatics import (FD_STEP, GRAD_NAMES, MU0, FieldError, RectCoil,
                                      assembly_field, coil_field, cuboid_field, field_on_samples,
                                      helmholtz_pair, write_field_map)

from oracles import biot_savart_quad, dipole_field, surface_charge_field

MM = 1e-3


def _rand_pairs(rng, n):
    for _ in range(n):
        c = rng.uniform(-2, 2, 3) * MM
        h = rng.uniform(0.1, 1.5, 3) * MM
        J = rng.normal(size=3) * 0.1
        while True:
            p = c + rng.uniform(-5, 5, 3) * MM
            if np.any(np.abs(p - c) > 1.05 * h):
                break
        yield c, h, J, p


class TestCuboid:
    def test_oracle(self):
        for c, h, J, p in _rand_pairs(np.random.default_rng(1), 30):
            b = cuboid_field(VoxelMagnet(c, h, J), p)
            np.testing.assert_allclose(b, surface_charge_field(p, c, h, J), rtol=1e-9,
                                       atol=1e-9 * np.linalg.norm(b))

    def test_centre_of_cube(self):
        # demagnetizing factor 1/3: B = mu0 (H + M) = 2/3 J at the centre
        b = cuboid_field(VoxelMagnet((0, 0, 0), (MM, MM, MM), (0, 0, 0.3)), np.zeros(3))
        np.testing.assert_allclose(b, [0, 0, 0.2], rtol=1e-12, atol=1e-15)

    def test_dipole_limit(self):
        rng = np.random.default_rng(3)
        J = np.array([0.02, -0.05, 0.1])
        for _ in range(10):
            d = rng.normal(size=3)
            p = d / np.linalg.norm(d) * 12 * MM
            b = cuboid_field(VoxelMagnet((0, 0, 0), (0.5 * MM,) * 3, J), p)
            o = dipole_field(p, np.zeros(3), MM ** 3, J)
            assert np.linalg.norm(b - o) / np.linalg.norm(o) < 0.01

    def test_axis_symmetry(self):
        v = VoxelMagnet((0, 0, 0), (MM, 2 * MM, 0.5 * MM), (0, 0, 0.1))
        p = np.array([1.7, 0.4, 2.9]) * MM
        b1 = cuboid_field(v, p)
        b2 = cuboid_field(v, p * [-1, 1, 1])
        np.testing.assert_allclose(b2, b1 * [-1, 1, 1], rtol=1e-13, atol=1e-18)

    def test_surface_points_finite(self):
        v = VoxelMagnet((0, 0, 0), (MM, MM, MM), (0.1, 0.1, 0.1))
        pts = np.array([[MM, 0, 0], [MM, MM, 0], [MM, MM, MM], [0, 0, -MM]])
        assert np.all(np.isfinite(cuboid_field(v, pts)))

    def test_nonfinite_point(self):
        with pytest.raises(FieldError):
            cuboid_field(VoxelMagnet((0, 0, 0), (MM,) * 3, (0, 0, 0.1)), [np.nan, 0, 0])

    @settings(max_examples=25, deadline=None)
    @given(st.floats(-3, 3), st.floats(0.1, 3))
    def test_linearity(self, s1, s2):
        # field is linear in the magnetization
        c = np.array([[0, 0, 0], [3 * MM, 0, 0]])
        h = np.full((2, 3), MM)
        m = np.array([[0, 0.1, 0.05], [0.02, 0, 0.1]])
        p = np.array([[0, 0, 4 * MM], [1 * MM, 5 * MM, 0]])
        f = lambda M: kernels.cuboid_field_sum(p, c, h, M)
        np.testing.assert_allclose(f(s1 * m), s1 * f(m), rtol=1e-12, atol=1e-20)
        m2 = m * [[1.0], [s2]]
        np.testing.assert_allclose(f(m2), f(m * [[1.0], [0.0]]) + s2 * f(m * [[0.0], [1.0]]),
                                   rtol=1e-12, atol=1e-20)


class TestBackends:
    def test_active_backend(self):
        assert kernels.BACKEND in ("cython", "python")

    def test_backends_agree(self):
        rng = np.random.default_rng(7)
        P = rng.uniform(-10, 10, (300, 3)) * MM
        C = rng.uniform(-10, 10, (40, 3)) * MM
        H = rng.uniform(0.2, 1, (40, 3)) * MM
        M = rng.normal(size=(40, 3)) * 0.1
        a = kernels.cuboid_field_sum(P, C, H, M)
        b = _kernels_py.cuboid_field_sum(P, C, H, M)
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12 * np.abs(a).max())

    def test_tensor_groups_agree(self):
        rng = np.random.default_rng(8)
        P = rng.uniform(-5, 5, (50, 3)) * MM
        C = rng.uniform(-10, 10, (12, 3)) * MM + 8 * MM
        H = np.full((12, 3), 0.5 * MM)
        sg = rng.choice([-1.0, 1.0], (12, 3))
        grp = rng.integers(0, 4, 12)
        a = kernels.cuboid_tensor_groups(P, C, H, sg, grp, 4)
        b = _kernels_py.cuboid_tensor_groups(P, C, H, sg, grp, 4)
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12 * np.abs(a).max())

    def test_tensor_groups_match_field(self):
        rng = np.random.default_rng(9)
        P = rng.uniform(-5, 5, (20, 3)) * MM
        C = rng.uniform(-10, 10, (6, 3)) * MM + 12 * MM
        H = np.full((6, 3), 0.5 * MM)
        grp = np.array([0, 0, 1, 1, 2, 2])
        u = rng.normal(size=(3, 3)) * 0.1
        T = kernels.cuboid_tensor_groups(P, C, H, np.ones((6, 3)), grp, 3)
        b = kernels.cuboid_field_sum(P, C, H, u[grp])
        np.testing.assert_allclose(np.einsum("pgij,gj->pi", T, u), b, rtol=1e-10,
                                   atol=1e-12 * np.abs(b).max())

    def test_pure_python_env_switch(self):
        env = dict(os.environ, MAGLARMOR_PURE_PYTHON="1")
        out = subprocess.run([sys.executable, "-c", "from maglarmor import kernels; print(kernels.BACKEND)"],
                             env=env, capture_output=True, text=True, check=True)
        assert out.stdout.strip() == "python"


class TestAssembly:
    def test_superposition(self):
        rng = np.random.default_rng(2)
        C = rng.uniform(-10, 10, (5, 3)) * MM
        H = np.full((5, 3), 0.4 * MM)
        M = rng.normal(size=(5, 3)) * 0.1
        asm = MagnetAssembly(C, H, M, check=False)
        p = np.array([20 * MM, 1 * MM, -3 * MM])
        tot = sum(cuboid_field(VoxelMagnet(c, h, m), p) for c, h, m in zip(C, H, M))
        np.testing.assert_allclose(assembly_field(asm, p), tot, rtol=1e-10, atol=1e-12 * np.abs(tot).max())

    def test_symmetry_folding_exact(self, topology_result):
        asm = topology_result.assembly
        assert asm.mirror_axes() == (0, 1, 2)
        p = np.random.default_rng(4).uniform(-3, 3, (200, 3)) * MM
        p = np.vstack([p, -p])
        a = assembly_field(asm, p, use_symmetry=True)
        b = assembly_field(asm, p, use_symmetry=False)
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-14)

    def test_empty(self):
        np.testing.assert_array_equal(assembly_field(MagnetAssembly.empty(), np.ones((2, 3))), 0)


class TestSamples:
    def test_maxwell_on_reference(self, topology_result, box):
        s = field_on_samples(topology_result.assembly, box, True)
        bound = 1e-6 * np.abs(s.B).max() / FD_STEP
        assert np.abs(s.divergence()).max() < bound
        assert np.abs(s.curl()).max() < bound

    def test_gradient_matches_oracle(self):
        v = VoxelMagnet((0, 0, 8 * MM), (3 * MM, 3 * MM, 1 * MM), (0.01, 0.02, 0.1))
        asm = MagnetAssembly.from_voxels([v])
        box = build_field_box(2 * MM, 4 * MM, (2, 2, 2))
        s = field_on_samples(asm, box, True)
        p = box.points[0]
        eps = 1e-7
        for j in range(3):
            d = np.zeros(3)
            d[j] = eps
            g = (surface_charge_field(p + d, v.center, v.half_extent, v.magnetization)
                 - surface_charge_field(p - d, v.center, v.half_extent, v.magnetization)) / (2 * eps)
            np.testing.assert_allclose(s.gradB[0, :, j], g, rtol=1e-5, atol=1e-6 * np.abs(g).max())

    def test_clearance_error_names_voxel(self, box):
        asm = MagnetAssembly([[0, 0, 0]], [[MM, MM, MM]], [[0, 0, 0.1]])
        with pytest.raises(GeometryError, match="voxel 0"):
            field_on_samples(asm, box)

    def test_external_uniform(self, box):
        s = field_on_samples(None, box, True, external=lambda p: np.tile([0, 0, 1e-3], (len(p), 1)))
        assert np.all(s.B[:, 2] == 1e-3) and np.all(s.gradB == 0)

    def test_lengths_checked(self):
        from maglarmor.magnetostatics import FieldSampleSet
        with pytest.raises(ValueError):
            FieldSampleSet(np.zeros((2, 3)), np.zeros(3), np.zeros((2, 3)))


class TestCoils:
    def test_oracle(self):
        coil = RectCoil((1 * MM, -2 * MM, 3 * MM), 40 * MM, 25 * MM, turns=3, current=2.0)
        for p in np.random.default_rng(5).uniform(-15, 15, (10, 3)) * MM:
            np.testing.assert_allclose(coil_field([coil], p),
                                       biot_savart_quad(coil.corners(), 6.0, p), rtol=1e-9)

    def test_centre_closed_form(self):
        w, h, I = 60 * MM, 20 * MM, 1.5
        coil = RectCoil((0, 0, 0), w, h, 1, I)
        # four straight sides at distances h/2 and w/2
        exp = sum(MU0 * I / (4 * math.pi * d) * L / math.hypot(d, L / 2)
                  for d, L in ((h / 2, w), (h / 2, w), (w / 2, h), (w / 2, h)))
        np.testing.assert_allclose(coil_field([coil], np.zeros(3)), [0, 0, exp], rtol=1e-13)

    def test_wire_error(self):
        coil = RectCoil((0, 0, 0), 10 * MM, 10 * MM, 1, 1.0)
        with pytest.raises(FieldError):
            coil_field([coil], [5 * MM, 0, 0])

    def test_helmholtz(self):
        pair = helmholtz_pair(50 * MM, 50 * MM, 25 * MM, 10, 1.0)
        b = coil_field(pair, np.zeros(3))
        assert b[2] > 0 and abs(b[0]) < 1e-15 * b[2] * 1e3

    @pytest.mark.parametrize("kw", [dict(width=0), dict(turns=0), dict(turns=1.5)])
    def test_invalid(self, kw):
        args = dict(center=(0, 0, 0), width=1e-2, height=1e-2, turns=1, current=1.0)
        args.update(kw)
        with pytest.raises(GeometryError):
            RectCoil(**args)


def test_write_field_map(tmp_path, box):
    s = field_on_samples(None, build_field_box(7 * MM, 40 * MM, (2, 2, 3)), True,
                         external=lambda p: np.tile([0, 0, 1e-3], (len(p), 1)))
    path = tmp_path / "f.csv"
    write_field_map(path, s)
    raw = path.read_bytes()
    assert b"\r" not in raw
    rows = list(csv.reader(raw.decode().splitlines()))
    assert rows[0][:6] == ["x_mm", "y_mm", "z_mm", "Bx_mT", "By_mT", "Bz_mT"]
    assert rows[0][6:] == GRAD_NAMES and len(rows) == 13
    assert float(rows[1][5]) == 1.0
