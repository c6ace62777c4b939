"""Kernel backend selection.

The compiled Cython extension is preferred when present; the numpy
reference implementation is the fallback.  Set MFGFLOW_PURE_PYTHON=1 to
force the fallback (used by the benchmark and by backend-parity tests).
"""

from __future__ import annotations

import os

from . import _ref

if os.environ.get("MFGFLOW_PURE_PYTHON"):
    backend = _ref
else:
    try:
        from . import _speedups as backend  # type: ignore[no-redef]
    except ImportError:
        backend = _ref

BACKEND_NAME: str = backend.NAME

__all__ = ["backend", "BACKEND_NAME", "_ref"]
