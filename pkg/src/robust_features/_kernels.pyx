# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled versions of the hot loops in _kernels_py."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, NAN

cnp.import_array()


cdef inline double _resid(double lam, const double[::1] s, const double[::1] sigma,
                          double b) noexcept nogil:
    cdef Py_ssize_t i
    cdef double acc = 0.0, r
    for i in range(s.shape[0]):
        r = lam * sigma[i] - 1.0
        acc += s[i] / (r * r)
    return acc - b


cdef int _solve_one(const double[::1] s, const double[::1] sigma, double b, double pole,
                    int max_iter, double *out) noexcept nogil:
    cdef double lo = pole * (1.0 + 1e-12), hi, mid
    cdef int it
    if _resid(lo, s, sigma, b) <= 0.0:
        out[0] = pole
        return 1
    hi = 2.0 * lo
    it = 0
    while _resid(hi, s, sigma, b) > 0.0:
        lo = hi
        hi *= 2.0
        it += 1
        if it >= 2100:
            out[0] = NAN
            return 2
    for it in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _resid(mid, s, sigma, b) > 0.0:
            lo = mid
        else:
            hi = mid
    out[0] = 0.5 * (lo + hi)
    return 0


def secular_bisect(s, sigma, budget, int max_iter=400):
    cdef const double[:, ::1] S = np.ascontiguousarray(np.atleast_2d(s), dtype=np.float64)
    cdef const double[::1] sig = np.ascontiguousarray(sigma, dtype=np.float64)
    cdef Py_ssize_t n = S.shape[0], k
    cdef const double[::1] B = np.ascontiguousarray(
        np.broadcast_to(np.asarray(budget, dtype=np.float64), (n,)))
    lam_arr = np.empty(n)
    status_arr = np.zeros(n, dtype=np.int64)
    cdef double[::1] lam = lam_arr
    cdef long long[::1] status = status_arr
    cdef double smin = sig[0]
    for k in range(sig.shape[0]):
        if sig[k] < smin:
            smin = sig[k]
    cdef double pole = 1.0 / smin
    with nogil:
        for k in range(n):
            status[k] = _solve_one(S[k], sig, B[k], pole, max_iter, &lam[k])
    return lam_arr, status_arr


def pgd_step(double[:, ::1] x, const double[:, ::1] x0, const double[:, ::1] g,
             double step, double eps, double sign, bint clip01):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double gn, dn, sc, v
    zero_arr = np.zeros(n, dtype=bool)
    cdef cnp.npy_bool[::1] zero = zero_arr
    with nogil:
        for i in range(n):
            gn = 0.0
            for j in range(d):
                gn += g[i, j] * g[i, j]
            gn = sqrt(gn)
            if gn == 0.0:
                zero[i] = True
            else:
                sc = sign * step / gn
                for j in range(d):
                    x[i, j] += g[i, j] * sc
            dn = 0.0
            for j in range(d):
                v = x[i, j] - x0[i, j]
                dn += v * v
            dn = sqrt(dn)
            if dn > eps:
                sc = eps / dn
                for j in range(d):
                    x[i, j] = x0[i, j] + (x[i, j] - x0[i, j]) * sc
            if clip01:
                for j in range(d):
                    if x[i, j] < 0.0:
                        x[i, j] = 0.0
                    elif x[i, j] > 1.0:
                        x[i, j] = 1.0
    return zero_arr
