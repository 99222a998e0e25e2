"""Kernel dispatch: compiled extension if importable, numpy fallback otherwise.

Set ROBUST_FEATURES_PURE=1 to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
if os.environ.get("ROBUST_FEATURES_PURE", "") in ("", "0"):
    try:
        from . import _kernels as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _kernels_py
else:
    _impl = _kernels_py

secular_bisect = _impl.secular_bisect
pgd_step = _impl.pgd_step
