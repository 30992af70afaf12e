"""Backend selection for the SGD hot loop.

The compiled ``_sgd`` extension is used when it imports; otherwise, or when
``CRSDEBIAS_PURE_PYTHON=1`` is set, the pure-Python twin is used.
"""

from __future__ import annotations

import os

from . import _sgd_py

_compiled = None
if os.environ.get("CRSDEBIAS_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _sgd as _compiled  # type: ignore[attr-defined]
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def get_kernel(name: str | None = None):
    """Return an ``sgd_epoch`` implementation: ``"cython"``, ``"python"`` or the active default."""
    name = name or BACKEND
    if name == "python":
        return _sgd_py.sgd_epoch
    if name == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernel unavailable; build with `pip install -e . --no-build-isolation`")
        return _compiled.sgd_epoch
    raise ValueError(f"unknown kernel backend {name!r}")


def compiled_available() -> bool:
    return _compiled is not None
