"""Hot loops for OOD construction with interchangeable backends.

``GEAR_NUMBA=0`` in the environment forces the numpy/Python reference path;
otherwise the numba kernels are used when numba imports cleanly.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

from gear.kernels import _numpy

_KERNELS = {"numpy": _numpy}

try:
    if os.environ.get("GEAR_NUMBA", "1").strip().lower() in ("0", "false", "no", "off"):
        raise ImportError("numba disabled by GEAR_NUMBA")
    from gear.kernels import _numba

    _KERNELS["numba"] = _numba
    BACKEND = "numba"
except ImportError:
    BACKEND = "numpy"

NUMBA_AVAILABLE = "numba" in _KERNELS


def get_backend(name: str | None = None) -> SimpleNamespace:
    name = name or BACKEND
    if name not in _KERNELS:
        raise ValueError(f"kernel backend {name!r} unavailable (have {sorted(_KERNELS)})")
    mod = _KERNELS[name]
    return SimpleNamespace(name=name, nearest_centroid=mod.nearest_centroid,
                           centroid_update=mod.centroid_update, anneal=mod.anneal)


def available_backends() -> list[str]:
    return sorted(_KERNELS)
