"""Hot layer kernels with a compiled backend and a numpy fallback.

The compiled Cython module is used when it was built; otherwise the numpy
implementation is selected. Set ``DCPASEG_KERNELS=numpy`` to force the
fallback (useful for benchmarking and cross-checking).
"""

import os

import numpy as np

from . import _npkernels as numpy_backend

try:
    from . import _ckernels as compiled_backend
except ImportError:  # extension not built
    compiled_backend = None

if compiled_backend is not None and os.environ.get("DCPASEG_KERNELS", "").lower() != "numpy":
    backend = compiled_backend
else:
    backend = numpy_backend

BACKEND_NAME = backend.NAME


def use(name):
    """Switch the active backend (``"cython"`` or ``"numpy"``)."""
    global backend, BACKEND_NAME
    if name == "numpy":
        backend = numpy_backend
    elif name == "cython":
        if compiled_backend is None:
            raise RuntimeError("compiled kernels are not available; build the extension first")
        backend = compiled_backend
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND_NAME = backend.NAME


def conv2d_forward(x, w, b):
    return backend.conv2d_forward(x, w, b)


def conv2d_backward(x, w, dy, need_dx=True):
    return backend.conv2d_backward(x, w, dy, need_dx)


def maxpool2_forward(x):
    return backend.maxpool2_forward(x)


def maxpool2_backward(dy, idx):
    return backend.maxpool2_backward(dy, idx)


def upconv2_forward(x, w, b):
    return backend.upconv2_forward(x, w, b)


def upconv2_backward(x, w, dy):
    return backend.upconv2_backward(x, w, dy)


def relu_forward(x):
    return backend.relu_forward(x.reshape(-1)).reshape(x.shape)


def relu_backward(y, g):
    g = np.ascontiguousarray(g, dtype=y.dtype)
    return backend.relu_backward(y.reshape(-1), g.reshape(-1)).reshape(y.shape)
