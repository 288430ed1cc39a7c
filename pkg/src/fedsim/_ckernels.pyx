# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled local-update kernels.

Same contract as ``fedsim._pykernels``; each function runs a whole block of
E local steps so the Python interpreter is entered once per device per round.
"""
import numpy as np

from libc.math cimport exp
from libc.stdint cimport int64_t


def quad_steps(const double[:, ::1] H, const double[::1] b, double scale,
               const double[::1] w0, const double[::1] etas):
    cdef Py_ssize_t d = H.shape[0]
    cdef Py_ssize_t n_steps = etas.shape[0]
    cdef Py_ssize_t s, i, j
    cdef double acc, gsq, eta
    cdef double max_gsq = 0.0

    w = np.array(w0, dtype=np.float64, copy=True)
    g = np.empty(d, dtype=np.float64)
    cdef double[::1] wv = w
    cdef double[::1] gv = g

    for s in range(n_steps):
        eta = etas[s]
        gsq = 0.0
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += H[i, j] * wv[j]
            acc = scale * (acc - b[i])
            gv[i] = acc
            gsq += acc * acc
        if gsq > max_gsq:
            max_gsq = gsq
        for i in range(d):
            wv[i] -= eta * gv[i]
    return w, max_gsq


def logistic_steps(const double[:, ::1] X, const int64_t[::1] y, int n_classes,
                   double lam, double scale, const double[::1] w0,
                   const double[::1] etas, const int64_t[:, ::1] batches):
    cdef Py_ssize_t n_feat = X.shape[1]
    cdef Py_ssize_t c = n_classes
    cdef Py_ssize_t size = c * n_feat + c
    cdef Py_ssize_t n_steps = etas.shape[0]
    cdef Py_ssize_t batch = batches.shape[1]
    cdef Py_ssize_t s, r, a, j, i, q, off
    cdef double acc, top, total, coef, g, gsq, eta, inv_batch, xij
    cdef double max_gsq = 0.0

    w = np.array(w0, dtype=np.float64, copy=True)
    grad = np.empty(size, dtype=np.float64)
    logits = np.empty(c, dtype=np.float64)
    cdef double[::1] wv = w
    cdef double[::1] gv = grad
    cdef double[::1] lv = logits

    inv_batch = 1.0 / batch
    for s in range(n_steps):
        eta = etas[s]
        for q in range(size):
            gv[q] = 0.0
        for r in range(batch):
            i = batches[s, r]
            top = -1e308
            for a in range(c):
                off = a * n_feat
                acc = wv[c * n_feat + a]
                for j in range(n_feat):
                    acc += wv[off + j] * X[i, j]
                lv[a] = acc
                if acc > top:
                    top = acc
            total = 0.0
            for a in range(c):
                lv[a] = exp(lv[a] - top)
                total += lv[a]
            for a in range(c):
                coef = lv[a] / total
                if a == y[i]:
                    coef -= 1.0
                off = a * n_feat
                for j in range(n_feat):
                    gv[off + j] += coef * X[i, j]
                gv[c * n_feat + a] += coef
        gsq = 0.0
        for q in range(size):
            g = scale * (gv[q] * inv_batch + 2.0 * lam * wv[q])
            gsq += g * g
            wv[q] -= eta * g
        if gsq > max_gsq:
            max_gsq = gsq
    return w, max_gsq
