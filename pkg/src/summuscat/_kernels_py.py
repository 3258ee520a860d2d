"""Pure numpy implementation of the batched MUSCAT kernels.

Flat parameter layout per row (``n_times == 0`` means the fully degenerate
model with a length-K ``b``; otherwise ``b`` is a ``(n_times, K)`` matrix)::

    a (K) | b (K) or B (n_times*K) | C (L*N*K) | k (L) | W (L*N*K) | V (L*N*K)
"""
import numpy as np


def layout(K, L, N, n_times):
    nb = K if n_times == 0 else n_times * K
    lnk = L * N * K
    oa = 0
    ob = oa + K
    oc = ob + nb
    ok = oc + lnk
    ow = ok + L
    ov = ow + lnk
    return oa, ob, oc, ok, ow, ov, ov + lnk


def _unpack(x, t, theta, K, n_times):
    Bn, L, N = x.shape
    oa, ob, oc, ok, ow, ov, P = layout(K, L, N, n_times)
    if theta.shape != (Bn, P):
        raise ValueError(f"theta has shape {theta.shape}, expected {(Bn, P)}")
    a = theta[:, oa:ob]
    if n_times == 0:
        bt = theta[:, ob:oc]
    else:
        if np.any(t < 0) or np.any(t >= n_times):
            raise ValueError("time index out of range for temporal factors")
        bt = theta[:, ob:oc].reshape(Bn, n_times, K)[np.arange(Bn), t]
    C = theta[:, oc:ok].reshape(Bn, L, N, K)
    k = theta[:, ok:ow]
    W = theta[:, ow:ov].reshape(Bn, L, N, K)
    V = theta[:, ov:P].reshape(Bn, L, N, K)
    return a, bt, C, k, W, V


def muscat_predict(x, t, theta, K, n_times):
    a, bt, C, k, W, V = _unpack(x, t, theta, K, n_times)
    xW = np.einsum("bln,blnk->blk", x, W)
    xV = np.einsum("bln,blnk->blk", x, V)
    p = np.einsum("blk,bk->bl", xW, a) + np.einsum("blk,bk->bl", xV, bt)
    return np.sum(k * k * p, axis=1)


def muscat_loss_grad(x, t, y, theta, K, n_times, lambda_cp, beta_simplex):
    """Per-row loss and gradient; returns ``(loss (B,), grad (B, P))``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    t = np.ascontiguousarray(t, dtype=np.int64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    Bn, L, N = x.shape
    oa, ob, oc, ok, ow, ov, P = layout(K, L, N, n_times)
    a, bt, C, k, W, V = _unpack(x, t, theta, K, n_times)

    xW = np.einsum("bln,blnk->blk", x, W)
    xV = np.einsum("bln,blnk->blk", x, V)
    p = np.einsum("blk,bk->bl", xW, a) + np.einsum("blk,bk->bl", xV, bt)
    k2 = k * k
    e = np.sum(k2 * p, axis=1) - y
    ab = a * bt
    r = x - np.einsum("blnk,bk->bln", C, ab)
    s = 1.0 - np.sum(k2, axis=1)
    loss = 0.5 * e * e + 0.5 * lambda_cp * np.sum(r * r, axis=(1, 2)) + beta_simplex * s * s

    grad = np.zeros((Bn, P))
    ek2 = e[:, None] * k2
    ctr = np.einsum("blnk,bln->bk", C, r)
    ga = np.einsum("bl,blk->bk", ek2, xW) - lambda_cp * ctr * bt
    gb = np.einsum("bl,blk->bk", ek2, xV) - lambda_cp * ctr * a
    grad[:, oa:ob] = ga
    if n_times == 0:
        grad[:, ob:oc] = gb
    else:
        gB = grad[:, ob:oc].reshape(Bn, n_times, K)
        gB[np.arange(Bn), t] = gb
    grad[:, oc:ok] = (-lambda_cp * r[:, :, :, None] * ab[:, None, None, :]).reshape(Bn, -1)
    grad[:, ok:ow] = 2.0 * e[:, None] * k * p - 4.0 * beta_simplex * s[:, None] * k
    xe = ek2[:, :, None] * x
    grad[:, ow:ov] = (xe[:, :, :, None] * a[:, None, None, :]).reshape(Bn, -1)
    grad[:, ov:P] = (xe[:, :, :, None] * bt[:, None, None, :]).reshape(Bn, -1)
    return loss, grad
