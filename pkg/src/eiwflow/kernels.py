"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise, or when the
environment variable ``EIWFLOW_PURE_PYTHON`` is set to a non-empty value other
than ``0``, the numpy implementation is used. ``BACKEND`` names the choice.
"""
import os

from . import _kernels_py

_force_pure = os.environ.get("EIWFLOW_PURE_PYTHON", "") not in ("", "0")

if _force_pure:
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
        BACKEND = "python"

im2col = _impl.im2col
col2im = _impl.col2im
kde_log_density_sorted = _impl.kde_log_density_sorted
kde_log_density_binned = _impl.kde_log_density_binned


def implementations():
    """Both backends keyed by name, the compiled one only if importable."""
    out = {"python": _kernels_py}
    try:
        from . import _kernels
        out["compiled"] = _kernels
    except ImportError:
        pass
    return out
