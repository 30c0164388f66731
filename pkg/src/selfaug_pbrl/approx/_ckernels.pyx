# cython: language_level=3
"""Compiled versions of the kernels in ``_pykernels``.

Each function performs the same floating-point operations in the same order
as its NumPy counterpart so results match exactly.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def leaky_relu(z, double slope):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] src = np.ascontiguousarray(z, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(src)
    cdef double[::1] s = src
    cdef double[::1] o = out
    cdef Py_ssize_t i, n = s.shape[0]
    cdef double x
    with nogil:
        for i in range(n):
            x = s[i]
            o[i] = x if x > 0.0 else x * slope
    return out.reshape(np.shape(z))


def leaky_relu_backward(z, grad, double slope):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] zs = np.ascontiguousarray(z, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gs = np.ascontiguousarray(grad, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(gs)
    cdef double[::1] a = zs
    cdef double[::1] g = gs
    cdef double[::1] o = out
    cdef Py_ssize_t i, n = a.shape[0]
    with nogil:
        for i in range(n):
            o[i] = g[i] if a[i] > 0.0 else g[i] * slope
    return out.reshape(np.shape(grad))


def adam_update(param, grad, m, v, double lr, double beta1, double beta2,
                double eps, long step):
    cdef double[::1] p = param.reshape(-1)
    cdef double[::1] g = np.ascontiguousarray(grad, dtype=np.float64).reshape(-1)
    cdef double[::1] mm = m.reshape(-1)
    cdef double[::1] vv = v.reshape(-1)
    cdef double bc1 = 1.0 - beta1 ** step
    cdef double bc2 = 1.0 - beta2 ** step
    cdef double c1 = 1.0 - beta1
    cdef double c2 = 1.0 - beta2
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double gi
    with nogil:
        for i in range(n):
            gi = g[i]
            mm[i] = mm[i] * beta1 + c1 * gi
            vv[i] = vv[i] * beta2 + c2 * (gi * gi)
            p[i] = p[i] - lr * (mm[i] / bc1) / (sqrt(vv[i] / bc2) + eps)


def kth_nearest_distance(queries, points, int k):
    cdef double[:, ::1] q = np.ascontiguousarray(np.atleast_2d(queries), dtype=np.float64)
    cdef double[:, ::1] pts = np.ascontiguousarray(np.atleast_2d(points), dtype=np.float64)
    cdef Py_ssize_t nq = q.shape[0], npnt = pts.shape[0], d = q.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(nq, dtype=np.float64)
    cdef double[::1] o = out
    # best[0..k-1] holds the k smallest squared distances seen so far, ascending
    cdef double[::1] best = np.empty(k, dtype=np.float64)
    cdef Py_ssize_t i, j, c, pos
    cdef double acc, diff
    with nogil:
        for i in range(nq):
            for c in range(k):
                best[c] = 1e308
            for j in range(npnt):
                acc = 0.0
                for c in range(d):
                    diff = q[i, c] - pts[j, c]
                    acc = acc + diff * diff
                if acc < best[k - 1]:
                    pos = k - 1
                    while pos > 0 and best[pos - 1] > acc:
                        best[pos] = best[pos - 1]
                        pos -= 1
                    best[pos] = acc
            o[i] = sqrt(best[k - 1])
    return out
