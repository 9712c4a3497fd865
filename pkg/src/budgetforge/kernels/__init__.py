"""Hot numeric kernels with a compiled core and a numpy fallback.

The compiled extension ``_ckernels`` is used when it imports; otherwise the
pure-numpy ``_fallback`` module is used. Setting ``BUDGETFORGE_PURE_PYTHON=1``
forces the fallback. ``BACKEND`` names the active implementation.

Dense layers always go through numpy: its matmul calls BLAS, which beats
the compiled loops at these sizes (see ``benchmarks/bench_kernels.py``).
The compiled twins stay available through ``backends()``.
"""

import os

import numpy as np

from . import _fallback

try:
    if os.environ.get("BUDGETFORGE_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("fallback forced by environment")
    from . import _ckernels as _impl
    BACKEND = "cython"
except ImportError:
    _impl = _fallback
    BACKEND = "numpy"

IDENTITY, RELU, SIGMOID = _fallback.IDENTITY, _fallback.RELU, _fallback.SIGMOID


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def layer_forward(weight, bias, x, act):
    return _fallback.layer_forward(_c(weight), _c(bias), _c(x), int(act))


def layer_backward(weight, x, pre, out, grad_out, act):
    return _fallback.layer_backward(_c(weight), _c(x), _c(pre), _c(out), _c(grad_out), int(act))


def sq_dists(a, b):
    return _impl.sq_dists(_c(a), _c(b))


def min_dist_update(min_sq, points, new_point):
    _impl.min_dist_update(min_sq, _c(points), _c(new_point))


def coverage_update(best, points, new_point, inv_two_sigma_sq):
    _impl.coverage_update(best, _c(points), _c(new_point), float(inv_two_sigma_sq))


def backends():
    """Return the available kernel modules keyed by name (for tests and benchmarks)."""
    found = {"numpy": _fallback}
    try:
        from . import _ckernels
        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
