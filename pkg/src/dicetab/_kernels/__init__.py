"""Backend selection for the fixed-point kernel.

The compiled extension is preferred when present; the numpy reference is the
fallback. Set DICETAB_BACKEND=python or DICETAB_BACKEND=compiled to force a
choice (the latter raises if the extension did not build).
"""

from __future__ import annotations

import os

from .reference import (
    GEN_CHI2,
    GEN_KL,
    GEN_SOFT_CHI2,
    GEN_SQL_CHI2,
    MODE_SCALED,
    MODE_SQL,
    MODE_UNSCALED,
    MODE_XQL,
    KernelError,
)
from . import reference as _reference

__all__ = [
    "semi_fixed_point", "BACKEND_NAME", "KernelError",
    "MODE_SCALED", "MODE_UNSCALED", "MODE_SQL", "MODE_XQL",
    "GEN_CHI2", "GEN_SQL_CHI2", "GEN_KL", "GEN_SOFT_CHI2",
    "available_backends", "get_backend",
]

_choice = os.environ.get("DICETAB_BACKEND", "auto").strip().lower()
if _choice not in ("auto", "python", "compiled"):
    raise ValueError(
        f"DICETAB_BACKEND must be auto, python, or compiled; got {_choice!r}")

_impl = None
if _choice in ("auto", "compiled"):
    try:
        from . import _fastloops as _impl  # type: ignore[no-redef]
    except ImportError:
        if _choice == "compiled":
            raise ImportError(
                "DICETAB_BACKEND=compiled but the extension is not built; "
                "reinstall without DICETAB_NO_EXT or use DICETAB_BACKEND=python")
        _impl = None
if _impl is None:
    _impl = _reference

semi_fixed_point = _impl.semi_fixed_point
BACKEND_NAME = _impl.BACKEND_NAME


def available_backends():
    names = ["python"]
    try:
        from . import _fastloops  # noqa: F401
        names.append("compiled")
    except ImportError:
        pass
    return names


def get_backend(name: str):
    """Fetch a specific backend module (used by the parity tests and the
    benchmark script)."""
    if name == "python":
        return _reference
    if name == "compiled":
        from . import _fastloops
        return _fastloops
    raise ValueError(f"unknown backend {name!r}")
