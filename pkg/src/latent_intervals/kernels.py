"""Kernel backend selection.

The compiled extension (``_kernels``, built from Cython) is used when it
imports; otherwise the numpy twin in ``_kernels_py`` is used. Setting the
environment variable ``LATENT_INTERVALS_KERNELS=python`` forces the fallback.
"""

import os

from . import _kernels_py

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

_impl = _kernels_py
if _compiled is not None and os.environ.get("LATENT_INTERVALS_KERNELS", "").lower() != "python":
    _impl = _compiled


def backend():
    """Name of the active backend: ``"compiled"`` or ``"python"``."""
    return _impl.NAME


def set_backend(name):
    """Switch the active backend; returns the previous backend's name."""
    global _impl
    if name not in BACKENDS:
        raise ValueError(f"kernel backend {name!r} is not available (have {sorted(BACKENDS)})")
    prev = _impl.NAME
    _impl = BACKENDS[name]
    return prev


def render(values, height, width):
    return _impl.render(_c(values), int(height), int(width))


def render_vjp(values, target):
    return _impl.render_vjp(_c(values), _c(target))


def coverage_counts(point, q_lo, q_hi, z, mask, lambdas):
    return _impl.coverage_counts(point, q_lo, q_hi, z, mask, lambdas)


def binom_logcdf(k, n, p):
    return _impl.binom_logcdf(k, n, float(p))


def hb_log_tail(mean, n, r):
    return _impl.hb_log_tail(float(mean), n, float(r))


def hb_ucb(mean, n, delta, tol=1e-9):
    return _impl.hb_ucb(float(mean), n, float(delta), float(tol))


def _c(a):
    import numpy as np

    return np.ascontiguousarray(a, dtype=np.float64)
