"""Compare the compiled and numpy cuboid kernels on problem sizes of a field-box evaluation.

Run ``python benchmarks/bench_kernels.py [--repeat N]``.  Prints one line per
kernel and size with the best wall time of each backend, the speedup and the
maximum relative difference between the two results.
"""
import argparse
import time

import numpy as np

from maglarmor import _kernels_py

try:
    from maglarmor import _kernels as _cy
except ImportError:  # pragma: no cover
    _cy = None


def _best(fn, repeat):
    t = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        t.append(time.perf_counter() - t0)
    return min(t), out


def _problem(n_points, n_voxels, seed=0):
    rng = np.random.default_rng(seed)
    P = rng.uniform(-3.5, 3.5, (n_points, 3)) * 1e-3
    C = rng.uniform(-10, 10, (n_voxels, 3)) * 1e-3
    C[:, 2] = np.sign(C[:, 2]) * (5e-3 + np.abs(C[:, 2]))
    H = np.full((n_voxels, 3), 1e-3)
    M = rng.normal(size=(n_voxels, 3)) * 0.05
    return P, C, H, M


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if _cy is None:
        print("compiled extension not built; only the numpy backend is available")
        return
    print(f"{'kernel':<22}{'points':>8}{'voxels':>8}{'cython s':>11}{'numpy s':>11}"
          f"{'speedup':>9}{'max rel diff':>14}")
    for n_p, n_v in [(1000, 100), (18225, 1080), (18225 * 5, 216)]:
        P, C, H, M = _problem(n_p, n_v)
        tc, bc = _best(lambda: _cy.cuboid_field_sum(P, C, H, M), args.repeat)
        tp, bp = _best(lambda: _kernels_py.cuboid_field_sum(P, C, H, M), args.repeat)
        d = float(np.max(np.abs(bc - bp)) / np.max(np.abs(bp)))
        print(f"{'cuboid_field_sum':<22}{n_p:>8}{n_v:>8}{tc:>11.4f}{tp:>11.4f}{tp / tc:>9.1f}{d:>14.2e}")
    for n_p, n_v, g in [(2000, 400, 50), (192 * 13, 1080, 135)]:
        P, C, H, _ = _problem(n_p, n_v)
        sg = np.ones((n_v, 3))
        grp = np.arange(n_v) % g
        tc, bc = _best(lambda: _cy.cuboid_tensor_groups(P, C, H, sg, grp, g), args.repeat)
        tp, bp = _best(lambda: _kernels_py.cuboid_tensor_groups(P, C, H, sg, grp, g), args.repeat)
        d = float(np.max(np.abs(bc - bp)) / np.max(np.abs(bp)))
        print(f"{'cuboid_tensor_groups':<22}{n_p:>8}{n_v:>8}{tc:>11.4f}{tp:>11.4f}{tp / tc:>9.1f}{d:>14.2e}")


if __name__ == "__main__":
    main()
