"""Hot numeric kernels with a selectable backend.

The numba backend is used when numba imports cleanly, unless the
environment variable ``RISKFILTER_BACKEND`` is set to ``numpy``. Both
backends expose the same three functions and agree to rounding error.
"""
from __future__ import annotations

import logging
import os

from . import _numpy

logger = logging.getLogger(__name__)

_requested = os.environ.get("RISKFILTER_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ImportError(f"RISKFILTER_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

_impl = _numpy
BACKEND = "numpy"
if _requested == "numba":
    try:
        from . import _numba as _impl  # noqa: F811
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - depends on the environment
        logger.info("numba unavailable, falling back to numpy kernels")
        _impl = _numpy

interp_stencil = _impl.interp_stencil
gather_sum = _impl.gather_sum
row_logmeanexp = _impl.row_logmeanexp


def backends():
    """Return the importable backend modules keyed by name."""
    found = {"numpy": _numpy}
    try:
        from . import _numba
        found["numba"] = _numba
    except ImportError:  # pragma: no cover
        pass
    return found

__all__ = ["BACKEND", "backends", "gather_sum", "interp_stencil", "row_logmeanexp"]
