# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled scalar kernels. Arithmetic mirrors ``_kernels_py`` step for step."""
from libc.math cimport exp, log, log1p, sqrt, fabs

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef double INV_E = 0.36787944117144233
cdef double E = 2.718281828459045
cdef double THIRD = 1.0 / 3.0
cdef double C3 = 11.0 / 72.0


cdef inline double _w0(double x) noexcept nogil:
    cdef double q, p, w, ew, f, wp1, dw, l1, l2
    cdef int i
    if x == 0.0:
        return 0.0
    q = x + INV_E
    if q <= 0.0:
        return -1.0
    if x < -0.25:
        p = sqrt(2.0 * E * q)
        w = -1.0 + p * (1.0 + p * (-THIRD + p * C3))
    elif x < 3.0:
        w = log1p(x)
    else:
        l1 = log(x)
        l2 = log(l1)
        w = l1 - l2 + l2 / l1
    for i in range(64):
        ew = exp(w)
        f = w * ew - x
        wp1 = w + 1.0
        if wp1 == 0.0:
            break
        dw = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w = w - dw
        if fabs(dw) <= 1e-12 * (1.0 + fabs(w)):
            break
    return w


cdef inline double _sl_weight(double loss, double tau, double sl_lambda) noexcept nogil:
    cdef double beta = (loss - tau) / (2.0 * sl_lambda)
    if beta < -INV_E:
        beta = -INV_E
    return exp(-_w0(beta))


def lambert_w(double x):
    return _w0(x)


def lambert_w_array(cnp.ndarray[cnp.float64_t, ndim=1] xs):
    cdef Py_ssize_t i, n = xs.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    with nogil:
        for i in range(n):
            out[i] = _w0(xs[i])
    return out


def superloss_weight(double loss, double tau, double sl_lambda):
    return _sl_weight(loss, tau, sl_lambda)


def superloss_weights(cnp.ndarray[cnp.float64_t, ndim=1] losses, double tau, double sl_lambda):
    cdef Py_ssize_t i, n = losses.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(n, dtype=np.float64)
    with nogil:
        for i in range(n):
            out[i] = _sl_weight(losses[i], tau, sl_lambda)
    return out


def threshold_sweep(cnp.ndarray[cnp.float64_t, ndim=1] values,
                    cnp.ndarray[cnp.int8_t, ndim=1] is_member,
                    Py_ssize_t n_members, Py_ssize_t n_nonmembers):
    """Scan sorted losses; return (lo, hi, score) of the best cut.

    ``score = TP * n_nonmembers + TN * n_members`` so ties compare exactly.
    A cut at index ``i`` labels ``values[:i]`` as members. ``lo``/``hi`` are the
    bracketing values, with -inf / +inf at the ends.
    """
    cdef Py_ssize_t i, n = values.shape[0]
    cdef long long tp = 0, tn = n_nonmembers
    cdef long long score, best = tn * n_members
    cdef Py_ssize_t best_i = 0
    with nogil:
        for i in range(n):
            if is_member[i]:
                tp += 1
            else:
                tn -= 1
            if i + 1 < n and values[i + 1] == values[i]:
                continue
            score = tp * n_nonmembers + tn * n_members
            if score > best:
                best = score
                best_i = i + 1
    lo = values[best_i - 1] if best_i > 0 else float("-inf")
    hi = values[best_i] if best_i < n else float("inf")
    return lo, hi, int(best)
