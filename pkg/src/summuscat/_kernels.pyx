# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batched MUSCAT kernels; same layout and results as ``_kernels_py``.

The per-row loops run without the GIL so callers may split a batch across
threads.
"""
import numpy as np
from libc.stdint cimport int64_t


def _layout(Py_ssize_t K, Py_ssize_t L, Py_ssize_t N, Py_ssize_t n_times):
    cdef Py_ssize_t nb = K if n_times == 0 else n_times * K
    cdef Py_ssize_t lnk = L * N * K
    cdef Py_ssize_t ob = K
    cdef Py_ssize_t oc = ob + nb
    cdef Py_ssize_t ok = oc + lnk
    cdef Py_ssize_t ow = ok + L
    cdef Py_ssize_t ov = ow + lnk
    return ob, oc, ok, ow, ov, ov + lnk


def _check(x, t, theta, Py_ssize_t K, Py_ssize_t n_times):
    cdef Py_ssize_t Bn = x.shape[0]
    ob, oc, ok, ow, ov, P = _layout(K, x.shape[1], x.shape[2], n_times)
    if theta.shape[0] != Bn or theta.shape[1] != P:
        raise ValueError(f"theta has shape {tuple(theta.shape)}, expected {(Bn, P)}")
    if t.shape[0] != Bn:
        raise ValueError("t length does not match batch")
    if n_times > 0:
        tt = np.asarray(t)
        if Bn and (tt.min() < 0 or tt.max() >= n_times):
            raise ValueError("time index out of range for temporal factors")
    return ob, oc, ok, ow, ov, P


def muscat_predict(const double[:, :, ::1] x, const int64_t[::1] t, const double[:, ::1] theta,
                   Py_ssize_t K, Py_ssize_t n_times):
    cdef Py_ssize_t Bn = x.shape[0], L = x.shape[1], N = x.shape[2]
    cdef Py_ssize_t ob, oc, ok, ow, ov, P
    ob, oc, ok, ow, ov, P = _check(x, t, theta, K, n_times)
    out = np.empty(Bn)
    cdef double[::1] o = out
    cdef Py_ssize_t b, l, n, kk, obt, wbase
    cdef double yhat, pl, u, kl
    with nogil:
        for b in range(Bn):
            obt = ob if n_times == 0 else ob + t[b] * K
            yhat = 0.0
            for l in range(L):
                pl = 0.0
                for n in range(N):
                    wbase = (l * N + n) * K
                    u = 0.0
                    for kk in range(K):
                        u = u + theta[b, kk] * theta[b, ow + wbase + kk] + theta[b, obt + kk] * theta[b, ov + wbase + kk]
                    pl = pl + x[b, l, n] * u
                kl = theta[b, ok + l]
                yhat = yhat + kl * kl * pl
            o[b] = yhat
    return out


def muscat_loss_grad(const double[:, :, ::1] x, const int64_t[::1] t, const double[::1] y,
                     const double[:, ::1] theta, Py_ssize_t K, Py_ssize_t n_times,
                     double lambda_cp, double beta_simplex):
    """Per-row loss and gradient; returns ``(loss (B,), grad (B, P))``."""
    cdef Py_ssize_t Bn = x.shape[0], L = x.shape[1], N = x.shape[2]
    cdef Py_ssize_t ob, oc, ok, ow, ov, P
    ob, oc, ok, ow, ov, P = _check(x, t, theta, K, n_times)
    if y.shape[0] != Bn:
        raise ValueError("y length does not match batch")
    loss_arr = np.empty(Bn)
    grad_arr = np.zeros((Bn, P))
    cdef double[::1] lo = loss_arr
    cdef double[:, ::1] g = grad_arr
    # scratch, reused per row
    xw_arr = np.empty((L, K))
    xv_arr = np.empty((L, K))
    p_arr = np.empty(L)
    r_arr = np.empty((L, N))
    ab_arr = np.empty(K)
    ctr_arr = np.empty(K)
    cdef double[:, ::1] xw = xw_arr
    cdef double[:, ::1] xv = xv_arr
    cdef double[::1] p = p_arr
    cdef double[:, ::1] r = r_arr
    cdef double[::1] ab = ab_arr
    cdef double[::1] ctr = ctr_arr
    cdef Py_ssize_t b, l, n, kk, obt, base
    cdef double e, s, k2sum, kl, acc, rr, xn, ek2, cpfit, ak, bk

    with nogil:
        for b in range(Bn):
            obt = ob if n_times == 0 else ob + t[b] * K
            for kk in range(K):
                ab[kk] = theta[b, kk] * theta[b, obt + kk]
                ctr[kk] = 0.0
            e = 0.0
            k2sum = 0.0
            cpfit = 0.0
            for l in range(L):
                for kk in range(K):
                    xw[l, kk] = 0.0
                    xv[l, kk] = 0.0
                for n in range(N):
                    xn = x[b, l, n]
                    base = (l * N + n) * K
                    acc = 0.0
                    for kk in range(K):
                        xw[l, kk] = xw[l, kk] + xn * theta[b, ow + base + kk]
                        xv[l, kk] = xv[l, kk] + xn * theta[b, ov + base + kk]
                        acc = acc + theta[b, oc + base + kk] * ab[kk]
                    rr = xn - acc
                    r[l, n] = rr
                    cpfit = cpfit + rr * rr
                    for kk in range(K):
                        ctr[kk] = ctr[kk] + theta[b, oc + base + kk] * rr
                acc = 0.0
                for kk in range(K):
                    acc = acc + xw[l, kk] * theta[b, kk] + xv[l, kk] * theta[b, obt + kk]
                p[l] = acc
                kl = theta[b, ok + l]
                e = e + kl * kl * acc
                k2sum = k2sum + kl * kl
            e = e - y[b]
            s = 1.0 - k2sum
            lo[b] = 0.5 * e * e + 0.5 * lambda_cp * cpfit + beta_simplex * s * s

            for kk in range(K):
                ak = 0.0
                bk = 0.0
                for l in range(L):
                    kl = theta[b, ok + l]
                    ak = ak + kl * kl * xw[l, kk]
                    bk = bk + kl * kl * xv[l, kk]
                g[b, kk] = e * ak - lambda_cp * ctr[kk] * theta[b, obt + kk]
                g[b, obt + kk] = e * bk - lambda_cp * ctr[kk] * theta[b, kk]
            for l in range(L):
                kl = theta[b, ok + l]
                g[b, ok + l] = 2.0 * e * kl * p[l] - 4.0 * beta_simplex * s * kl
                ek2 = e * kl * kl
                for n in range(N):
                    base = (l * N + n) * K
                    xn = ek2 * x[b, l, n]
                    rr = -lambda_cp * r[l, n]
                    for kk in range(K):
                        g[b, oc + base + kk] = rr * ab[kk]
                        g[b, ow + base + kk] = xn * theta[b, kk]
                        g[b, ov + base + kk] = xn * theta[b, obt + kk]
    return loss_arr, grad_arr
