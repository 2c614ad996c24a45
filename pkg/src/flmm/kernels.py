"""Backend selection for the hot kernels.

The compiled extension is used when importable; set ``FLMM_PURE_PYTHON=1``
to force the numpy fallback. ``BACKEND`` names the active one.
"""

import os

from . import _fallback

if os.environ.get("FLMM_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
    BACKEND = "python"
else:
    try:
        from . import _kernels as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback
        BACKEND = "python"

bspline_design = _impl.bspline_design
local_linear_1d = _impl.local_linear_1d
local_linear_2d = _impl.local_linear_2d

__all__ = ["BACKEND", "bspline_design", "local_linear_1d", "local_linear_2d"]
