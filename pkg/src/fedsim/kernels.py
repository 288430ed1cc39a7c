"""Kernel backend selection.

The compiled extension is used when it imports; set ``FEDSIM_PURE_PYTHON=1``
to force the numpy fallback. ``BACKEND`` names the active implementation.
Softmax steps on batches wider than ``WIDE_BATCH`` rows go to numpy either
way, since its BLAS matrix products beat the compiled loops there.
"""
import os

from fedsim import _pykernels

_force_python = os.environ.get("FEDSIM_PURE_PYTHON", "").lower() in ("1", "true", "yes")

if _force_python:
    _impl = _pykernels
    BACKEND = "python"
else:
    try:
        from fedsim import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels
        BACKEND = "python"

WIDE_BATCH = 96

quad_steps = _impl.quad_steps


def logistic_steps(X, y, n_classes, lam, scale, w, etas, batches):
    impl = _pykernels if batches.shape[1] > WIDE_BATCH else _impl
    return impl.logistic_steps(X, y, n_classes, lam, scale, w, etas, batches)


__all__ = ["BACKEND", "quad_steps", "logistic_steps"]
