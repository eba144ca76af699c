"""Hot numeric kernels behind the tensor primitives.

Two interchangeable backends: a Cython extension (``_fast``) and a numpy
reference (``reference``). The compiled core is preferred when importable;
set SEQGEN_FORCE_REFERENCE=1 to force the fallback (the parity tests and
the benchmark in benchmarks/bench_kernels.py compare the two).
"""

import os

import numpy as np

from . import reference

if os.environ.get("SEQGEN_FORCE_REFERENCE"):
    _impl = reference
    BACKEND = "reference"
else:
    try:
        from . import _fast as _impl
        BACKEND = "compiled"
    except ImportError:
        _impl = reference
        BACKEND = "reference"


def _c(a):
    return np.ascontiguousarray(a)


def conv2d_forward(x, k, b):
    return _impl.conv2d_forward(_c(x), _c(k), _c(b))


def conv2d_backward(dout, x, k):
    return _impl.conv2d_backward(_c(dout), _c(x), _c(k))


def bilinear_forward(img, px, py):
    return _impl.bilinear_forward(_c(img), _c(px), _c(py))


def bilinear_backward(dout, img, px, py):
    return _impl.bilinear_backward(_c(dout), _c(img), _c(px), _c(py))
