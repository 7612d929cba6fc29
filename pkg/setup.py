"""Builds the optional Cython kernel; the package falls back to numpy without it."""
import os

import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover
    cythonize = None


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # pragma: no cover
            print(f"warning: compiled kernels not built ({exc}); using numpy fallback")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:  # pragma: no cover
            print(f"warning: failed to build {ext.name} ({exc}); using numpy fallback")


def _has_avx2():
    try:
        with open("/proc/cpuinfo") as fh:
            flags = fh.read()
    except OSError:
        return False
    return " avx2" in flags and " fma" in flags


openmp = [] if os.environ.get("MAGLARMOR_NO_OPENMP") else ["-fopenmp"]
# finite-math without reassociation: summation order (and thus output bits) is preserved
math_flags = ["-O3", "-fno-math-errno", "-fno-trapping-math", "-ffinite-math-only", "-fopenmp-simd"]
libs = []
if _has_avx2() and not os.environ.get("MAGLARMOR_NO_SIMD"):
    math_flags += ["-mavx2", "-mfma", "-DMAGLARMOR_SIMD_MATH"]
    libs = ["mvec"]
ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "maglarmor._kernels",
                ["src/maglarmor/_kernels.pyx"],
                include_dirs=[np.get_include(), "src/maglarmor"],
                depends=["src/maglarmor/_cuboid.h"],
                extra_compile_args=math_flags + openmp,
                extra_link_args=openmp,
                libraries=libs + ["m"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules, cmdclass={"build_ext": OptionalBuildExt})
