# cython: language_level=3
"""Compiled versions of the O(N^2) kernels.

Signatures mirror ``_kernels_py``. Sums use Neumaier compensation in a
fixed loop order, so results are reproducible run to run.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, floor

cnp.import_array()

ctypedef cnp.uint64_t u64


cdef inline void _neumaier(double x, double* s, double* c) noexcept nogil:
    cdef double t = s[0] + x
    if fabs(s[0]) >= fabs(x):
        c[0] += (s[0] - t) + x
    else:
        c[0] += (x - t) + s[0]
    s[0] = t


def acausal_pair_sum(W, bits):
    cdef double[:, ::1] w = np.ascontiguousarray(W, dtype=np.float64)
    cdef u64[:, ::1] b = np.ascontiguousarray(bits, dtype=np.uint64)
    cdef Py_ssize_t n = w.shape[0], d = w.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double s = 0.0, c = 0.0, acc, diff
    cdef u64 one = 1
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                if (b[i, j >> 6] >> (j & 63)) & one:
                    continue
                if (b[j, i >> 6] >> (i & 63)) & one:
                    continue
                acc = 0.0
                for k in range(d):
                    diff = w[i, k] - w[j, k]
                    acc += diff * diff
                _neumaier(acc, &s, &c)
    return s + c


def pair_shell_sum(z, V, a, R, box):
    cdef double[:, ::1] zz = np.ascontiguousarray(z, dtype=np.float64)
    cdef double[:, ::1] vv = np.ascontiguousarray(V, dtype=np.float64)
    cdef double[::1] aa = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[::1] rr = np.ascontiguousarray(R, dtype=np.float64)
    cdef double[::1] bx = np.ascontiguousarray(box, dtype=np.float64)
    cdef Py_ssize_t n = zz.shape[0], d = zz.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double s = 0.0, c = 0.0, dist2, dx, lo, hi, acc, diff
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                dist2 = 0.0
                for k in range(d):
                    dx = zz[i, k] - zz[j, k]
                    if bx[k] > 0:
                        dx = dx - bx[k] * floor(dx / bx[k] + 0.5)
                    dist2 += dx * dx
                lo = 0.5 * (aa[i] + aa[j])
                hi = 0.5 * (rr[i] + rr[j])
                if dist2 < lo * lo or dist2 > hi * hi:
                    continue
                acc = 0.0
                for k in range(d):
                    diff = vv[i, k] - vv[j, k]
                    acc += diff * diff
                _neumaier(acc, &s, &c)
    return s + c


def closure_bits(Py_ssize_t n, child_ptr, child_idx, order):
    cdef cnp.int64_t[::1] ptr = np.ascontiguousarray(child_ptr, dtype=np.int64)
    cdef cnp.int64_t[::1] idx = np.ascontiguousarray(child_idx, dtype=np.int64)
    cdef cnp.int64_t[::1] ordv = np.ascontiguousarray(order, dtype=np.int64)
    cdef Py_ssize_t nwords = (n + 63) // 64
    out = np.zeros((n, nwords), dtype=np.uint64)
    cdef u64[:, ::1] b = out
    cdef Py_ssize_t t, v, e, ch, k
    cdef u64 one = 1
    with nogil:
        for t in range(n - 1, -1, -1):
            v = ordv[t]
            for e in range(ptr[v], ptr[v + 1]):
                ch = idx[e]
                for k in range(nwords):
                    b[v, k] |= b[ch, k]
                b[v, ch >> 6] |= one << (ch & 63)
    return out
