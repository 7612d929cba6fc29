"""Selects the cuboid kernel backend at import time.

The compiled extension is preferred; set ``MAGLARMOR_PURE_PYTHON=1`` to force
the numpy implementation.  ``BACKEND`` names the active one.
"""
from __future__ import annotations

import os

from . import _kernels_py

if os.environ.get("MAGLARMOR_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

cuboid_field_sum = _impl.cuboid_field_sum
cuboid_tensor_groups = _impl.cuboid_tensor_groups

__all__ = ["BACKEND", "cuboid_field_sum", "cuboid_tensor_groups"]


def default_threads() -> int:
    env = os.environ.get("MAGLARMOR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1
