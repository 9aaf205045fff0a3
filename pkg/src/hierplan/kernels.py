"""Backend selection for the geometry kernels.

The compiled extension is used when it imports; setting
``HIERPLAN_PURE_PYTHON=1`` forces the numpy fallback.
"""
import os

import numpy as np

from . import _kernels_py

_impl = _kernels_py
BACKEND = "python"

if os.environ.get("HIERPLAN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"


def _rows(a, width):
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != width:
        raise ValueError(f"expected (n, {width}) array, got shape {arr.shape}")
    return arr


def obb_separation_pairs(a, b):
    return _impl.obb_separation_pairs(_rows(a, 5), _rows(b, 5))


def obb_overlap_pairs(a, b):
    return _impl.obb_overlap_pairs(_rows(a, 5), _rows(b, 5))


def obb_overlap_any(ego, agents):
    agents = np.ascontiguousarray(agents, dtype=np.float64)
    if agents.ndim != 3 or agents.shape[2] != 5:
        raise ValueError(f"expected (n, m, 5) agent array, got shape {agents.shape}")
    return _impl.obb_overlap_any(_rows(ego, 5), agents)


def points_in_polygon(pts, poly):
    return _impl.points_in_polygon(_rows(pts, 2), _rows(poly, 2))


def points_in_obbs(pts, boxes):
    return _impl.points_in_obbs(_rows(pts, 2), _rows(boxes, 5))


def use_backend(name):
    """Switch backend at runtime (benchmarks and parity tests)."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _kernels_py, "python"
    elif name == "cython":
        from . import _kernels as compiled

        _impl, BACKEND = compiled, "cython"
    else:
        raise ValueError(f"unknown backend {name!r}")
