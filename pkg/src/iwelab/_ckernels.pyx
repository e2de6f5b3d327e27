# Compiled counterparts of iwelab._kernels_np. Dense products go through
# BLAS dgemm (same engine NumPy uses) with the bias/relu epilogues and the
# momentum update fused into single C passes, which removes the Python
# dispatch and temporary-array overhead of the fallback.

import numpy as np

from scipy.linalg.cython_blas cimport dgemm

NAME = "ext"


cdef void _gemm(char ta, char tb, int m, int n, int k, double alpha,
                double* a, int lda, double* b, int ldb, double beta,
                double* c, int ldc) noexcept nogil:
    dgemm(&ta, &tb, &m, &n, &k, &alpha, a, &lda, b, &ldb, &beta, c, &ldc)


def affine(double[:, ::1] x, double[:, ::1] w, double[::1] b):
    # y = x @ w.T + b; row-major buffers mapped onto column-major BLAS views
    cdef int n = x.shape[0], d = x.shape[1], o = w.shape[0]
    out = np.empty((n, o), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef Py_ssize_t i, j
    with nogil:
        _gemm(b'T', b'N', o, n, d, 1.0, &w[0, 0], d, &x[0, 0], d, 0.0, &y[0, 0], o)
        for i in range(n):
            for j in range(o):
                y[i, j] += b[j]
    return out


def affine_bwd(double[:, ::1] x, double[:, ::1] w, double[:, ::1] dy,
               bint need_dx=True):
    cdef int n = x.shape[0], d = x.shape[1], o = w.shape[0]
    dw_arr = np.empty((o, d), dtype=np.float64)
    db_arr = np.zeros(o, dtype=np.float64)
    cdef double[:, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef double[:, ::1] dx
    cdef Py_ssize_t i, j
    dx_arr = None
    if need_dx:
        dx_arr = np.empty((n, d), dtype=np.float64)
        dx = dx_arr
    with nogil:
        _gemm(b'N', b'T', d, o, n, 1.0, &x[0, 0], d, &dy[0, 0], o, 0.0, &dw[0, 0], d)
        for i in range(n):
            for j in range(o):
                db[j] += dy[i, j]
        if need_dx:
            _gemm(b'N', b'N', d, n, o, 1.0, &w[0, 0], d, &dy[0, 0], o, 0.0, &dx[0, 0], d)
    return dx_arr, dw_arr, db_arr


def relu(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef Py_ssize_t i, t
    with nogil:
        for i in range(n):
            for t in range(d):
                y[i, t] = x[i, t] if x[i, t] > 0.0 else 0.0
    return out


def relu_bwd(double[:, ::1] act, double[:, ::1] dy):
    cdef Py_ssize_t n = act.shape[0], d = act.shape[1]
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] dx = out
    cdef Py_ssize_t i, t
    with nogil:
        for i in range(n):
            for t in range(d):
                dx[i, t] = dy[i, t] if act[i, t] > 0.0 else 0.0
    return out


def sgd_update(param, grad, vel, double lr, double momentum,
               double weight_decay):
    # Flat view keeps one kernel for both matrices and bias vectors.
    cdef double[::1] p = param.reshape(-1)
    cdef double[::1] g = grad.reshape(-1)
    cdef double[::1] v = vel.reshape(-1)
    cdef Py_ssize_t i, n = p.shape[0]
    with nogil:
        for i in range(n):
            v[i] = momentum * v[i] + g[i] + weight_decay * p[i]
            p[i] -= lr * v[i]
