# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the recurrent inner loops and edit distance.

Same contracts as ``_pykernels``; see that module for documentation.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport tanh

cnp.import_array()

BACKEND = "compiled"


def rnn_tanh_forward(double[:, ::1] x, double[:, ::1] wx, double[:, ::1] wh,
                     double[::1] b, double[::1] h0):
    cdef Py_ssize_t T = x.shape[0]
    cdef Py_ssize_t H = wh.shape[0]
    # input projection is step-independent; let BLAS handle it
    xw_arr = np.ascontiguousarray(np.dot(np.asarray(x), np.asarray(wx)))
    cdef double[:, ::1] xw = xw_arr
    out = np.empty((T, H), dtype=np.float64)
    cdef double[:, ::1] h = out
    cdef Py_ssize_t t, i, j
    cdef double acc
    for t in range(T):
        for j in range(H):
            acc = xw[t, j] + b[j]
            if t == 0:
                for i in range(H):
                    acc += h0[i] * wh[i, j]
            else:
                for i in range(H):
                    acc += h[t - 1, i] * wh[i, j]
            h[t, j] = tanh(acc)
    return out


def rnn_tanh_backward(double[:, ::1] x, double[:, ::1] h, double[::1] h0,
                      double[:, ::1] wx, double[:, ::1] wh,
                      double[:, ::1] dh_out):
    cdef Py_ssize_t T = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t H = wh.shape[0]
    dx_arr = np.empty((T, d), dtype=np.float64)
    dwx_arr = np.zeros((d, H), dtype=np.float64)
    dwh_arr = np.zeros((H, H), dtype=np.float64)
    db_arr = np.zeros(H, dtype=np.float64)
    dh_arr = np.zeros(H, dtype=np.float64)
    da_arr = np.empty(H, dtype=np.float64)
    cdef double[:, ::1] dx = dx_arr
    cdef double[:, ::1] dwx = dwx_arr
    cdef double[:, ::1] dwh = dwh_arr
    cdef double[::1] db = db_arr
    cdef double[::1] dh = dh_arr
    cdef double[::1] da = da_arr
    cdef Py_ssize_t t, i, j
    cdef double acc
    for t in range(T - 1, -1, -1):
        for j in range(H):
            acc = dh[j] + dh_out[t, j]
            da[j] = acc * (1.0 - h[t, j] * h[t, j])
            db[j] += da[j]
        for i in range(d):
            for j in range(H):
                dwx[i, j] += x[t, i] * da[j]
        if t > 0:
            for i in range(H):
                for j in range(H):
                    dwh[i, j] += h[t - 1, i] * da[j]
        else:
            for i in range(H):
                for j in range(H):
                    dwh[i, j] += h0[i] * da[j]
        for i in range(d):
            acc = 0.0
            for j in range(H):
                acc += da[j] * wx[i, j]
            dx[t, i] = acc
        for i in range(H):
            acc = 0.0
            for j in range(H):
                acc += da[j] * wh[i, j]
            dh[i] = acc
    return dx_arr, dwx_arr, dwh_arr, db_arr, dh_arr


def levenshtein(int[::1] a, int[::1] b):
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    if n == 0:
        return m
    if m == 0:
        return n
    prev_arr = np.arange(m + 1, dtype=np.intp)
    cur_arr = np.zeros(m + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] prev = prev_arr
    cdef Py_ssize_t[::1] cur = cur_arr
    cdef Py_ssize_t[::1] tmp
    cdef Py_ssize_t i, j, best, cand
    cdef int ai
    for i in range(1, n + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if ai != b[j - 1]:
                best += 1
            cand = prev[j] + 1
            if cand < best:
                best = cand
            cand = cur[j - 1] + 1
            if cand < best:
                best = cand
            cur[j] = best
        tmp = prev
        prev = cur
        cur = tmp
    return int(prev[m])
