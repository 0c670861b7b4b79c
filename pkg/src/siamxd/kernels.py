"""Backend selection for the hot kernels.

The compiled Cython extension is preferred; the numpy fallback is used when
the extension was not built or when ``SIAMXD_PURE_PYTHON`` is set to a
non-empty value other than ``0``. :func:`use_backend` switches at runtime,
which the tests and the benchmark rely on.
"""
import os

import numpy as np

from siamxd import _pykernels

try:
    from siamxd import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

if _ckernels is not None and os.environ.get("SIAMXD_PURE_PYTHON", "") in ("", "0"):
    _impl = _ckernels
    BACKEND = "cython"
else:
    _impl = _pykernels
    BACKEND = "python"


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Select the kernel backend by name ("cython" or "python").

    Returns the previously active backend name so callers can restore it.
    """
    global _impl, BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}; have {available_backends()}")
    previous = BACKEND
    _impl = _BACKENDS[name]
    BACKEND = name
    return previous


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def pairwise_distances(A, B):
    return _impl.pairwise_distances(_c(A), _c(B))


def pairwise_distances_backward(A, B, dist, grad):
    return _impl.pairwise_distances_backward(_c(A), _c(B), _c(dist), _c(grad))


def conv2d_forward(x, w):
    return _impl.conv2d_forward(_c(x), _c(w))


def conv2d_backward(x, w, grad):
    return _impl.conv2d_backward(_c(x), _c(w), _c(grad))
