# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled BPR/PAL epoch kernel. Mirrors ``_sgd_py.sgd_epoch`` operation for operation."""

from libc.math cimport exp, log1p
from libc.stdlib cimport malloc, free

cimport numpy as cnp

cnp.import_array()


cdef inline double softplus_neg(double x) nogil:
    if x > 0:
        return log1p(exp(-x))
    return -x + log1p(exp(x))


cdef inline double sigmoid_neg(double x) nogil:
    cdef double e
    if x >= 0:
        e = exp(-x)
        return e / (1.0 + e)
    return 1.0 / (1.0 + exp(x))


def sgd_epoch(double[:, ::1] U, double[:, ::1] V, double[:, ::1] A,
              const cnp.int64_t[::1] users, const cnp.int64_t[::1] pos, const cnp.int64_t[::1] neg,
              const cnp.int64_t[::1] attr_ptr, const cnp.int64_t[::1] attr_idx,
              const double[::1] item_weight, const double[::1] item_penalty,
              double lambda_reg, double lr):
    cdef Py_ssize_t n = users.shape[0]
    cdef Py_ssize_t d = U.shape[1]
    cdef Py_ssize_t k, f, p, u, i, j, a
    cdef double w, c, x, g, total = 0.0, reg, nrm, shrink_reg, shrink_pos
    cdef double *q = <double *> malloc(d * sizeof(double))
    cdef double *diff = <double *> malloc(d * sizeof(double))
    if q == NULL or diff == NULL:
        free(q)
        free(diff)
        raise MemoryError()
    shrink_reg = 1.0 / (1.0 + 2.0 * lr * lambda_reg)
    try:
        with nogil:
            for k in range(n):
                u = users[k]
                i = pos[k]
                j = neg[k]
                w = item_weight[i]
                c = item_penalty[i]
                for f in range(d):
                    q[f] = 0.0
                for p in range(attr_ptr[k], attr_ptr[k + 1]):
                    a = attr_idx[p]
                    for f in range(d):
                        q[f] += A[a, f]
                x = 0.0
                for f in range(d):
                    q[f] = U[u, f] + q[f]
                    diff[f] = V[i, f] - V[j, f]
                    x += q[f] * diff[f]

                nrm = 0.0
                for f in range(d):
                    nrm += V[i, f] * V[i, f]
                total += w * softplus_neg(x) + c * nrm
                reg = 0.0
                for f in range(d):
                    reg += U[u, f] * U[u, f]
                for f in range(d):
                    reg += V[j, f] * V[j, f]
                for p in range(attr_ptr[k], attr_ptr[k + 1]):
                    a = attr_idx[p]
                    nrm = 0.0
                    for f in range(d):
                        nrm += A[a, f] * A[a, f]
                    reg += nrm
                total += lambda_reg * reg

                g = -w * sigmoid_neg(x)
                shrink_pos = 1.0 + 2.0 * lr * c
                for f in range(d):
                    U[u, f] = (U[u, f] - lr * g * diff[f]) * shrink_reg
                    V[i, f] = (V[i, f] - lr * g * q[f]) / shrink_pos
                    V[j, f] = (V[j, f] + lr * g * q[f]) * shrink_reg
                for p in range(attr_ptr[k], attr_ptr[k + 1]):
                    a = attr_idx[p]
                    for f in range(d):
                        A[a, f] = (A[a, f] - lr * g * diff[f]) * shrink_reg
    finally:
        free(q)
        free(diff)
    return total
