"""Kernel backend selection.

The compiled core is used when it imports; ``PFGUIDE_BACKEND=python`` forces
the numpy fallback.  Both backends consume identical uniform streams.
"""
from __future__ import annotations

import os

from . import _pykernels

if os.environ.get("PFGUIDE_BACKEND", "").lower() == "python":
    kernels = _pykernels
else:
    try:
        from . import _kernels as kernels
    except ImportError:  # extension not built
        kernels = _pykernels

BACKEND = kernels.NAME


def get_backend(name: str | None = None):
    """Return the kernel module called ``name`` (default: the active one)."""
    if name is None:
        return kernels
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown backend {name!r}")


def available_backends() -> list[str]:
    names = ["python"]
    try:
        from . import _kernels  # noqa: F401

        names.append("cython")
    except ImportError:
        pass
    return names
