"""Window-factor kernels with backend selection at import time.

The compiled extension (Cython) is preferred when built; the numpy fallback
is bit-compatible up to floating-point reassociation. Force a backend with
TCVIO_KERNELS=python or TCVIO_KERNELS=compiled.
"""

import os

from . import _pycore

_requested = os.environ.get("TCVIO_KERNELS", "auto")

if _requested == "python":
    _impl = _pycore
    KERNEL_BACKEND = "python"
elif _requested in ("auto", "compiled"):
    try:
        from . import _fastcore as _impl

        KERNEL_BACKEND = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = _pycore
        KERNEL_BACKEND = "python"
else:
    raise ValueError(f"unknown TCVIO_KERNELS value {_requested!r}")

accumulate_two_view = _impl.accumulate_two_view
cost_two_view = _impl.cost_two_view
accumulate_world_point = _impl.accumulate_world_point
cost_world_point = _impl.cost_world_point
preintegrate = _impl.preintegrate

__all__ = [
    "KERNEL_BACKEND",
    "accumulate_two_view",
    "cost_two_view",
    "accumulate_world_point",
    "cost_world_point",
    "preintegrate",
]
