"""Exit-decision kernels: compiled extension when available, numpy otherwise.

The active backend is chosen once at import time and exposed as `BACKEND`
("compiled" or "python"). `get_backend(name)` returns a specific
implementation for parity tests and benchmarks.
"""

from __future__ import annotations

import os

from eesim._kernels import _ref

if os.environ.get("EESIM_PURE_PYTHON"):
    _impl = _ref
    BACKEND = "python"
else:
    try:
        from eesim._kernels import _exitcore as _impl

        BACKEND = "compiled"
    except ImportError:
        _impl = _ref
        BACKEND = "python"

eval_thresholds = _impl.eval_thresholds
exit_sites = _impl.exit_sites


def get_backend(name: str):
    """Return the kernel module for `name` ("compiled" or "python")."""
    if name == "python":
        return _ref
    if name == "compiled":
        from eesim._kernels import _exitcore

        return _exitcore
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends() -> list[str]:
    names = ["python"]
    try:
        get_backend("compiled")
        names.insert(0, "compiled")
    except ImportError:
        pass
    return names
