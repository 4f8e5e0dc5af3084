"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Backend selection happens once at import time from the FTMNET_KERNELS
environment variable:

    FTMNET_KERNELS=numba   force the jitted kernels (error if numba missing)
    FTMNET_KERNELS=numpy   force the pure-numpy fallback
    unset / auto           numba when importable, numpy otherwise

Both backends expose the same functions with identical semantics:
im2col, col2im, slic_assign, slic_update. benchmarks/bench_kernels.py
compares them head to head.
"""

import os

from ..errors import ConfigError
from . import numpy_backend

_requested = os.environ.get("FTMNET_KERNELS", "auto").lower()

if _requested not in ("auto", "numba", "numpy"):
    raise ConfigError(f"FTMNET_KERNELS must be auto|numba|numpy, got {_requested!r}")

if _requested in ("auto", "numba"):
    try:
        from . import numba_backend as _impl

        _backend = "numba"
    except ImportError:
        if _requested == "numba":
            raise ConfigError("FTMNET_KERNELS=numba but numba is not importable")
        _impl = numpy_backend
        _backend = "numpy"
else:
    _impl = numpy_backend
    _backend = "numpy"

im2col = _impl.im2col
col2im = _impl.col2im
slic_assign = _impl.slic_assign
slic_update = _impl.slic_update


def backend_name() -> str:
    """Name of the kernel backend selected at import time."""
    return _backend
