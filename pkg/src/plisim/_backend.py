"""Kernel backend selection.

The compiled extension is used when importable; setting the environment
variable ``PLISIM_PURE_PYTHON=1`` forces the pure-Python kernels.
"""
import os

import numpy as np

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if not os.environ.get("PLISIM_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build environment
        _impl = _pykernels


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def euler_lti(A, B, u, x0, q, nsteps, impl=None):
    """Run ``nsteps`` Euler steps of dx/dt = A x + B u (u constant).

    Returns ``(states, bad)`` where ``states`` has shape (nsteps, n) and
    ``bad`` is the first non-finite step index or -1.
    """
    impl = impl or _impl
    A = _c(A)
    out = np.empty((int(nsteps), A.shape[0]))
    bad = impl.euler_lti(A, _c(B), _c(u), _c(x0), float(q), int(nsteps), out)
    return out, bad


def discrete_lti(Ad, c, x0, nsteps, impl=None):
    impl = impl or _impl
    Ad = _c(Ad)
    out = np.empty((int(nsteps), Ad.shape[0]))
    bad = impl.discrete_lti(Ad, _c(c), _c(x0), int(nsteps), out)
    return out, bad


def implementations():
    """Return the available kernel modules keyed by backend name."""
    impls = {"python": _pykernels}
    try:
        from . import _ckernels
        impls["cython"] = _ckernels
    except ImportError:  # pragma: no cover
        pass
    return impls
