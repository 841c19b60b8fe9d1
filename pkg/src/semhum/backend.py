"""Kernel backend selection.

The hot inner loops (trilinear grid sampling and its scatter-add adjoint,
ray/capsule intersection) exist twice: a pure-numpy implementation and a
numba-jitted one.  Both compute the same arithmetic in the same order, so
results are bit-identical; the numba path is just faster.

Selection: the SEMHUM_BACKEND environment variable ("numba" or "numpy")
wins; otherwise numba is used when importable, numpy otherwise.  `use()`
switches at runtime (the benchmark relies on this).
"""
from __future__ import annotations

import os

from . import _kernels_numpy

try:
    from . import _kernels_numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    _kernels_numba = None
    HAS_NUMBA = False

_IMPLS = {"numpy": _kernels_numpy}
if HAS_NUMBA:
    _IMPLS["numba"] = _kernels_numba

_active_name = "numpy"
_active = _kernels_numpy


def use(name: str) -> None:
    """Select the kernel backend ("numpy" or "numba")."""
    global _active_name, _active
    if name not in _IMPLS:
        raise ValueError(
            f"unknown backend {name!r}; available: {sorted(_IMPLS)}"
        )
    _active_name = name
    _active = _IMPLS[name]


def active() -> str:
    return _active_name


def kernels():
    """The currently selected kernel module."""
    return _active


def _resolve_default() -> str:
    env = os.environ.get("SEMHUM_BACKEND", "").strip().lower()
    if env:
        if env not in _IMPLS:
            raise RuntimeError(
                f"SEMHUM_BACKEND={env!r} but that backend is unavailable; "
                f"available: {sorted(_IMPLS)}"
            )
        return env
    return "numba" if HAS_NUMBA else "numpy"


use(_resolve_default())
