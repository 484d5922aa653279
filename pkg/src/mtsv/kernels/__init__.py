"""Kernel backend selection.

The compiled Cython extension is preferred when it imports; otherwise the
pure-numpy implementation is used. MTSV_KERNELS=fast|numpy|auto overrides
the choice (``fast`` raises if the extension is missing).
"""

import os

import numpy as np

_requested = os.environ.get("MTSV_KERNELS", "auto").lower()
if _requested not in ("auto", "fast", "numpy"):
    raise ValueError(f"MTSV_KERNELS must be auto, fast or numpy, got {_requested!r}")

if _requested == "numpy":
    from . import _numpy as _impl

    BACKEND = "numpy"
else:
    try:
        from . import _fast as _impl

        BACKEND = "fast"
    except ImportError:
        if _requested == "fast":
            raise
        from . import _numpy as _impl

        BACKEND = "numpy"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv1d_forward(x, w, stride):
    return _impl.conv1d_forward(_c(x), _c(w), stride)


def conv1d_backward(x, w, gy, stride):
    return _impl.conv1d_backward(_c(x), _c(w), _c(gy), stride)


def maxpool1d_forward(x, kernel):
    return _impl.maxpool1d_forward(_c(x), kernel)


def maxpool1d_backward(gy, idx, kernel):
    return _impl.maxpool1d_backward(_c(gy), np.ascontiguousarray(idx, dtype=np.int64), kernel)


def get_backend(name):
    """Return a specific backend module, for benchmarks and cross-checks."""
    if name == "numpy":
        from . import _numpy

        return _numpy
    if name == "fast":
        from . import _fast

        return _fast
    raise ValueError(name)
