"""Hot inner loops, with a numba path and a pure-numpy fallback.

The backend is picked once at import time from ``CSTFORMER_BACKEND``
(``numba`` or ``numpy``). Unset means numba when it imports, numpy otherwise.
Both backends are always importable by name for equivalence tests and the
benchmark.
"""
import importlib
import os

from . import _numpy

ADPIT_PATTERNS = _numpy.ADPIT_PATTERNS

_requested = os.environ.get("CSTFORMER_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise ImportError(f"CSTFORMER_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

_numba = None
if _requested != "numpy":
    try:
        _numba = importlib.import_module(".kernels._numba", "cstformer")
    except ImportError:
        if _requested == "numba":
            raise

BACKEND = "numba" if _numba is not None else "numpy"
_impl = _numba if _numba is not None else _numpy


def get_backend(name):
    """Return the kernel namespace for ``name`` ('numba' or 'numpy')."""
    if name == "numpy":
        return _numpy
    if name == "numba":
        return _numba or importlib.import_module(".kernels._numba", "cstformer")
    raise ValueError(f"unknown kernel backend {name!r}")


depthwise_conv2d_forward = _impl.depthwise_conv2d_forward
depthwise_conv2d_backward = _impl.depthwise_conv2d_backward
col2im = _impl.col2im
max_pool2d_forward = _impl.max_pool2d_forward
max_pool2d_backward = _impl.max_pool2d_backward
adpit_select = _impl.adpit_select
