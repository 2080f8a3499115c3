# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log, cos, M_PI
from libc.string cimport memcpy

ctypedef unsigned long long u64

cdef u64 GOLDEN = 0x9E3779B97F4A7C15ULL
cdef u64 PATH_MULT = 0xD1B54A32D192ED03ULL
cdef double INV_2_53 = 1.0 / 9007199254740992.0


cdef inline u64 mix64(u64 z) noexcept nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def normal_increments(object seed, Py_ssize_t path_start, Py_ssize_t n_paths, Py_ssize_t n_steps):
    cdef u64 s = mix64(<u64>(int(seed) % (1 << 64)))
    out = np.empty((n_paths, n_steps))
    cdef double[:, ::1] o = out
    cdef Py_ssize_t p, i
    cdef u64 key, c
    cdef double u1, u2
    with nogil:
        for p in range(n_paths):
            key = mix64(s + <u64>(path_start + p + 1) * PATH_MULT)
            for i in range(n_steps):
                c = <u64>i * 2ULL
                u1 = (<double>(mix64(key + (c + 1ULL) * GOLDEN) >> 11) + 0.5) * INV_2_53
                u2 = (<double>(mix64(key + (c + 2ULL) * GOLDEN) >> 11) + 0.5) * INV_2_53
                o[p, i] = sqrt(-2.0 * log(u1)) * cos(2.0 * M_PI * u2)
    return out


cdef inline void matmul(const double* a, const double* b, double* c, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, j, k
    cdef double s
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(n):
                s = s + a[i * n + k] * b[k * n + j]
            c[i * n + j] = s


cdef inline void one_step(const double* minv, const double* bm, const double* b2, double* L,
                          double* tmp, double* v, double dwi, double dt, bint milstein,
                          Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t e, nn = n * n
    cdef double c2
    matmul(bm, L, tmp, n)
    for e in range(nn):
        v[e] = L[e] + dwi * tmp[e]
    if milstein:
        c2 = 0.5 * (dwi * dwi - dt)
        matmul(b2, L, tmp, n)
        for e in range(nn):
            v[e] = v[e] + c2 * tmp[e]
    matmul(minv, v, L, n)


cdef inline void set_identity(double* L, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    for i in range(n * n):
        L[i] = 0.0
    for i in range(n):
        L[i * n + i] = 1.0


def flow_propagate(minv_in, bmat_in, dw_in, Py_ssize_t i0, double dt, bint milstein):
    cdef const double[:, :, ::1] minv = np.ascontiguousarray(minv_in, dtype=np.float64)
    cdef const double[:, :, ::1] bmat = np.ascontiguousarray(bmat_in, dtype=np.float64)
    cdef const double[:, ::1] dw = np.ascontiguousarray(dw_in, dtype=np.float64)
    cdef Py_ssize_t P = dw.shape[0], N = dw.shape[1], n = minv.shape[1], nn = n * n
    b2_arr = np.ascontiguousarray(np.matmul(bmat_in, bmat_in)) if milstein else np.zeros((N, n, n))
    cdef const double[:, :, ::1] b2 = b2_arr
    out = np.empty((P, N + 1 - i0, n, n))
    cdef double[:, :, :, ::1] o = out
    cdef double[::1] L = np.empty(nn), tmp = np.empty(nn), v = np.empty(nn)
    cdef Py_ssize_t p, i, k
    with nogil:
        for p in range(P):
            set_identity(&L[0], n)
            memcpy(&o[p, 0, 0, 0], &L[0], nn * sizeof(double))
            k = 0
            for i in range(i0, N):
                one_step(&minv[i, 0, 0], &bmat[i, 0, 0], &b2[i, 0, 0], &L[0], &tmp[0], &v[0],
                         dw[p, i], dt, milstein, n)
                k = k + 1
                memcpy(&o[p, k, 0, 0], &L[0], nn * sizeof(double))
    return out


def flow_moments(minv_in, bmat_in, dw_in, Py_ssize_t i0, double dt, bint milstein):
    cdef const double[:, :, ::1] minv = np.ascontiguousarray(minv_in, dtype=np.float64)
    cdef const double[:, :, ::1] bmat = np.ascontiguousarray(bmat_in, dtype=np.float64)
    cdef const double[:, ::1] dw = np.ascontiguousarray(dw_in, dtype=np.float64)
    cdef Py_ssize_t P = dw.shape[0], N = dw.shape[1], n = minv.shape[1], nn = n * n
    b2_arr = np.ascontiguousarray(np.matmul(bmat_in, bmat_in)) if milstein else np.zeros((N, n, n))
    cdef const double[:, :, ::1] b2 = b2_arr
    out = np.zeros((N + 1 - i0, n, n, n, n))
    cdef double[:, ::1] o = out.reshape(N + 1 - i0, nn * nn)
    cdef double[::1] L = np.empty(nn), tmp = np.empty(nn), v = np.empty(nn)
    cdef Py_ssize_t p, i, k, e, f
    cdef double le
    with nogil:
        for p in range(P):
            set_identity(&L[0], n)
            for e in range(nn):
                le = L[e]
                for f in range(nn):
                    o[0, e * nn + f] += le * L[f]
            k = 0
            for i in range(i0, N):
                one_step(&minv[i, 0, 0], &bmat[i, 0, 0], &b2[i, 0, 0], &L[0], &tmp[0], &v[0],
                         dw[p, i], dt, milstein, n)
                k = k + 1
                for e in range(nn):
                    le = L[e]
                    for f in range(nn):
                        o[k, e * nn + f] += le * L[f]
    return out


cdef inline void add_quadform(const double* L, const double* F, double w, double* acc,
                              double* tmp, Py_ssize_t n) noexcept nogil:
    # acc += w * L' F L
    cdef Py_ssize_t a, b, c
    cdef double s
    matmul(F, L, tmp, n)
    for a in range(n):
        for b in range(n):
            s = 0.0
            for c in range(n):
                s = s + L[c * n + a] * tmp[c * n + b]
            acc[a * n + b] = acc[a * n + b] + w * s


def pair_quadform_sums(minv_in, bmat_in, dw_in, xi_in, fmat_in, weights_in, double dt, bint milstein):
    if np.ndim(minv_in) == 4:
        from . import _kernels_py
        return _kernels_py.pair_quadform_sums(minv_in, bmat_in, dw_in, xi_in, fmat_in,
                                              weights_in, dt, milstein)
    cdef const double[:, :, ::1] minv = np.ascontiguousarray(minv_in, dtype=np.float64)
    cdef const double[:, :, ::1] bmat = np.ascontiguousarray(bmat_in, dtype=np.float64)
    cdef const double[:, ::1] dw = np.ascontiguousarray(dw_in, dtype=np.float64)
    cdef const double[:, :, ::1] xi = np.ascontiguousarray(xi_in, dtype=np.float64)
    cdef const double[:, :, :, ::1] fm = np.ascontiguousarray(fmat_in, dtype=np.float64)
    cdef const double[:, ::1] w = np.ascontiguousarray(weights_in, dtype=np.float64)
    cdef Py_ssize_t P = dw.shape[0], N = dw.shape[1], n = minv.shape[1], nn = n * n
    b2_arr = np.ascontiguousarray(np.matmul(bmat_in, bmat_in)) if milstein else np.zeros((N, n, n))
    cdef const double[:, :, ::1] b2 = b2_arr
    out = np.empty((P, N + 1, n, n))
    cdef double[:, :, :, ::1] o = out
    cdef double[::1] L = np.empty(nn), tmp = np.empty(nn), v = np.empty(nn), acc = np.empty(nn)
    cdef Py_ssize_t p, i, j, e
    cdef double wij
    with nogil:
        for p in range(P):
            for i in range(N + 1):
                set_identity(&L[0], n)
                for e in range(nn):
                    acc[e] = w[i, i] * fm[p, i, e // n, e % n]
                for j in range(i, N):
                    one_step(&minv[j, 0, 0], &bmat[j, 0, 0], &b2[j, 0, 0], &L[0], &tmp[0], &v[0],
                             dw[p, j], dt, milstein, n)
                    wij = w[i, j + 1]
                    if wij != 0.0:
                        add_quadform(&L[0], &fm[p, j + 1, 0, 0], wij, &acc[0], &tmp[0], n)
                add_quadform(&L[0], &xi[p, 0, 0], 1.0, &acc[0], &tmp[0], n)
                memcpy(&o[p, i, 0, 0], &acc[0], nn * sizeof(double))
    return out
