"""Kernel backend selection.

Two interchangeable kernel sets exist: the compiled extension ``_fastk``
(Cython) and the numpy fallback. The compiled one is used when importable
unless overridden via the MPSIM_BACKEND environment variable ("cython",
"numpy", or "auto") or :func:`use`.
"""

import os

from . import numpy_backend

try:
    from . import _fastk
except ImportError:
    _fastk = None

_BACKENDS = {"numpy": numpy_backend}
if _fastk is not None:
    _BACKENDS["cython"] = _fastk

_active = numpy_backend


def available():
    """Names of the importable kernel backends."""
    return sorted(_BACKENDS)


def use(name):
    """Select the active backend by name; returns the backend module."""
    global _active
    if name == "auto":
        name = "cython" if "cython" in _BACKENDS else "numpy"
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available (have {available()})")
    _active = _BACKENDS[name]
    return _active


def get(name=None):
    """Backend module by name, or the active one."""
    if name is None:
        return _active
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available (have {available()})")
    return _BACKENDS[name]


def active_name():
    return _active.name


def conv2d_forward(x, w, b, return_cols=False):
    return _active.conv2d_forward(x, w, b, return_cols)


def conv2d_backward(x, w, gout, cols=None, need_gx=True):
    return _active.conv2d_backward(x, w, gout, cols, need_gx)


def maxpool2_forward(x):
    return _active.maxpool2_forward(x)


def maxpool2_backward(gout, idx, h, w):
    return _active.maxpool2_backward(gout, idx, h, w)


def bilinear_sample(src, mask, xs, ys):
    return _active.bilinear_sample(src, mask, xs, ys)


def window_sum(img, s):
    return _active.window_sum(img, s)


use(os.environ.get("MPSIM_BACKEND", "auto"))
