# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fixed-step kernels for frozen (time-invariant) linear systems.

Arithmetic order matches ``_pykernels`` exactly so both backends agree bitwise
on IEEE-754 hardware (the extension is built with ``-ffp-contract=off``).
"""
from libc.math cimport isfinite


def euler_lti(const double[:, ::1] A, const double[:, ::1] B,
              const double[::1] u, const double[::1] x0,
              double q, Py_ssize_t nsteps, double[:, ::1] out):
    """Explicit Euler on dx/dt = A x + B u with u held constant.

    Writes the state after step k into ``out[k]``. Returns the index of the
    first non-finite step, or -1.
    """
    cdef Py_ssize_t n = A.shape[0]
    cdef Py_ssize_t m = B.shape[1]
    cdef Py_ssize_t i, k, s
    cdef double r
    cdef double bu[64]
    cdef double x[64]
    cdef double xn[64]
    if n > 64 or m > 64:
        raise ValueError("euler_lti supports at most 64 states and inputs")
    for i in range(n):
        r = 0.0
        for k in range(m):
            r = r + B[i, k] * u[k]
        bu[i] = r
        x[i] = x0[i]
    for s in range(nsteps):
        for i in range(n):
            r = 0.0
            for k in range(n):
                r = r + A[i, k] * x[k]
            r = r + bu[i]
            xn[i] = x[i] + q * r
        for i in range(n):
            x[i] = xn[i]
            out[s, i] = xn[i]
            if not isfinite(xn[i]):
                return s
    return -1


def discrete_lti(const double[:, ::1] Ad, const double[::1] c,
                 const double[::1] x0, Py_ssize_t nsteps, double[:, ::1] out):
    """Iterate x_{k+1} = Ad x_k + c. Same return convention as euler_lti."""
    cdef Py_ssize_t n = Ad.shape[0]
    cdef Py_ssize_t i, k, s
    cdef double r
    cdef double x[256]
    cdef double xn[256]
    if n > 256:
        raise ValueError("discrete_lti supports at most 256 states")
    for i in range(n):
        x[i] = x0[i]
    for s in range(nsteps):
        for i in range(n):
            r = 0.0
            for k in range(n):
                r = r + Ad[i, k] * x[k]
            xn[i] = r + c[i]
        for i in range(n):
            x[i] = xn[i]
            out[s, i] = xn[i]
            if not isfinite(xn[i]):
                return s
    return -1
