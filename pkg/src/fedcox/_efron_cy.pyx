# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Single-pass C kernel for the tied-event partial log-likelihood.

Same contract as :func:`fedcox._efron_np.efron_eval`; rows must be sorted by
survival time descending with event rows last inside each tied-time block.
"""

from libc.math cimport exp, log, isfinite

import numpy as np

cimport numpy as cnp

cnp.import_array()


def efron_eval(double[:, ::1] x, double[::1] lp,
               cnp.int64_t[::1] risk_len, cnp.int64_t[::1] tie_counts,
               bint want_derivatives=True):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t p = x.shape[1]
    cdef Py_ssize_t nblocks = risk_len.shape[0]

    grad_arr = np.zeros(p)
    hess_arr = np.zeros((p, p))
    s1_arr = np.zeros(p)
    s2_arr = np.zeros((p, p))
    h1_arr = np.zeros(p)
    h2_arr = np.zeros((p, p))
    xs_arr = np.zeros(p)
    d1_arr = np.zeros(p)

    cdef double[::1] grad = grad_arr
    cdef double[:, ::1] hess = hess_arr
    cdef double[::1] s1 = s1_arr
    cdef double[:, ::1] s2 = s2_arr
    cdef double[::1] h1 = h1_arr
    cdef double[:, ::1] h2 = h2_arr
    cdef double[::1] xs = xs_arr
    cdef double[::1] d1 = d1_arr

    cdef double loglik = 0.0
    cdef double s0 = 0.0
    cdef double h0, th, xa, frac, phi, inv_phi, inv_phi2, d2ab
    cdef Py_ssize_t pos = 0
    cdef Py_ssize_t j, i, a, b, lo, m, l
    cdef int status = 0

    with nogil:
        for j in range(nblocks):
            while pos < risk_len[j]:
                th = exp(lp[pos])
                s0 += th
                if want_derivatives:
                    for a in range(p):
                        xa = x[pos, a] * th
                        s1[a] += xa
                        for b in range(a + 1):
                            s2[a, b] += xa * x[pos, b]
                pos += 1

            m = tie_counts[j]
            lo = risk_len[j] - m
            h0 = 0.0
            if want_derivatives:
                for a in range(p):
                    h1[a] = 0.0
                    xs[a] = 0.0
                    for b in range(a + 1):
                        h2[a, b] = 0.0
            for i in range(lo, risk_len[j]):
                th = exp(lp[i])
                h0 += th
                loglik += lp[i]
                if want_derivatives:
                    for a in range(p):
                        xa = x[i, a]
                        h1[a] += xa * th
                        xs[a] += xa
                        for b in range(a + 1):
                            h2[a, b] += xa * x[i, b] * th

            if want_derivatives:
                for a in range(p):
                    grad[a] += xs[a]

            for l in range(m):
                frac = <double>l / <double>m
                phi = s0 - frac * h0
                if not (phi > 0.0 and isfinite(phi)):
                    status = 1
                    break
                loglik -= log(phi)
                if want_derivatives:
                    inv_phi = 1.0 / phi
                    inv_phi2 = inv_phi * inv_phi
                    for a in range(p):
                        d1[a] = s1[a] - frac * h1[a]
                    for a in range(p):
                        grad[a] -= d1[a] * inv_phi
                        for b in range(a + 1):
                            d2ab = s2[a, b] - frac * h2[a, b]
                            hess[a, b] -= d2ab * inv_phi - d1[a] * d1[b] * inv_phi2
            if status:
                break

    if status or not isfinite(loglik):
        raise ValueError("non-positive risk-set mass")
    if not want_derivatives:
        return loglik, None, None

    # mirror the lower triangle
    for a in range(p):
        for b in range(a):
            hess_arr[b, a] = hess_arr[a, b]
    if not (np.all(np.isfinite(grad_arr)) and np.all(np.isfinite(hess_arr))):
        raise ValueError("non-finite derivatives")
    return loglik, grad_arr, hess_arr
