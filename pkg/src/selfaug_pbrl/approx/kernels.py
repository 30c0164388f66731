"""Kernel dispatch: compiled Cython kernels when built, NumPy otherwise.

Set ``SELFAUG_PBRL_PURE_PYTHON=1`` before import to force the NumPy path.
"""

import os

from . import _pykernels

BACKEND = "numpy"

if not os.environ.get("SELFAUG_PBRL_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels
    else:
        BACKEND = "cython"
else:
    _impl = _pykernels

leaky_relu = _impl.leaky_relu
leaky_relu_backward = _impl.leaky_relu_backward
adam_update = _impl.adam_update
kth_nearest_distance = _impl.kth_nearest_distance

__all__ = [
    "BACKEND",
    "leaky_relu",
    "leaky_relu_backward",
    "adam_update",
    "kth_nearest_distance",
]
