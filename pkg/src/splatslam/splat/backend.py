"""Rasterizer kernel selection: compiled extension with numpy fallback.

The Cython kernel and the numpy kernel implement the same math in the same
traversal order; the compiled one is selected automatically when present.
Set SPLATSLAM_BACKEND=python or =native to force a choice.
"""

from __future__ import annotations

import os

from . import _raster_py

try:
    from . import _raster_cy
    HAS_NATIVE = True
except ImportError:
    _raster_cy = None
    HAS_NATIVE = False


def available_backends():
    return ["native", "python"] if HAS_NATIVE else ["python"]


def get_backend(name: str = None):
    """Resolve a kernel module by name, env override, or availability."""
    name = name or os.environ.get("SPLATSLAM_BACKEND")
    if name is None:
        name = "native" if HAS_NATIVE else "python"
    if name == "native":
        if not HAS_NATIVE:
            raise RuntimeError("native rasterizer extension is not built")
        return _raster_cy
    if name == "python":
        return _raster_py
    raise ValueError(f"unknown backend {name!r} (use 'native' or 'python')")


def active_backend_name() -> str:
    name = os.environ.get("SPLATSLAM_BACKEND")
    if name:
        return name
    return "native" if HAS_NATIVE else "python"
