"""Hot-loop kernels for the companion-form linear recurrence.

The compiled Cython extension is used when it was built; otherwise the NumPy
fallback is selected at import.  Set ``SPACETIME_ROBUST_PURE_PYTHON=1`` to
force the fallback.
"""
import os

from . import fallback

BACKEND = "python"
_compiled = None
if os.environ.get("SPACETIME_ROBUST_PURE_PYTHON", "") != "1":
    try:
        from . import _scan as _compiled

        BACKEND = "cython"
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else fallback
scan_states = _impl.scan_states
scan_states_backward = _impl.scan_states_backward


def available_backends():
    names = ["python"]
    if _compiled is not None:
        names.append("cython")
    return names


def get_backend(name):
    """Return the kernel module called ``name`` ("python" or "cython")."""
    if name == "python":
        return fallback
    if name == "cython" and _compiled is not None:
        return _compiled
    raise ValueError(f"kernel backend {name!r} is not available")
