"""Vectorized numpy implementations of the hot network kernels.

This is the fallback backend (see :mod:`ctklab.backend`). All functions
share a flat calling convention so the numba twin in
:mod:`ctklab._kernels_numba` can mirror them exactly:

* ``theta``   flat float64 parameter vector, layout produced by nets.py
* ``widths``  int64 array (L+1,) of layer widths, widths[0] = input dim
* ``act_id``  0 = relu, 1 = tanh, 2 = identity
* ``fscale``  float64 (L,) multiplier applied to W @ a (NTK parameterization)
* ``w_off/b_off/g_off/s_off`` int64 (L,) offsets into theta (-1 when absent)
* ``nm_off``  int64 (L,) offsets into ``stats`` (-1 for un-normalized layers)
* ``stats``   packed running statistics: mean then var per normalized layer
* ``eps``     variance floor inside the normalization denominator

Row order of Jacobians is sample-major then output-dimension, matching
the reshape contract (N, K) <-> (N*K,).
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def _act(u: np.ndarray, act_id: int) -> np.ndarray:
    if act_id == 0:
        return np.where(u > 0.0, u, 0.0)
    if act_id == 1:
        return np.tanh(u)
    return u


def _actp(u: np.ndarray, act_id: int) -> np.ndarray:
    # relu subgradient at exactly 0 is 0, so derivatives stay deterministic
    if act_id == 0:
        return (u > 0.0).astype(np.float64)
    if act_id == 1:
        t = np.tanh(u)
        return 1.0 - t * t
    return np.ones_like(u)


def _weight(theta, w_off, l, nout, nin):
    return theta[w_off[l] : w_off[l] + nout * nin].reshape(nout, nin)


def _forward_caches(theta, X, widths, act_id, fscale, w_off, b_off, g_off,
                    s_off, nm_off, stats, eps):
    """Forward pass with running statistics, keeping per-layer caches.

    Returns (activations a_0..a_L, pre-activations u_1..u_L, normalized
    values zt_1..u_L or None).
    """
    L = len(widths) - 1
    a = X
    acts = [X]
    pre = [None]
    ztil = [None]
    for l in range(L):
        nin, nout = widths[l], widths[l + 1]
        W = _weight(theta, w_off, l, nout, nin)
        b = theta[b_off[l] : b_off[l] + nout]
        z = a @ W.T * fscale[l] + b
        if nm_off[l] >= 0:
            m = stats[nm_off[l] : nm_off[l] + nout]
            v = stats[nm_off[l] + nout : nm_off[l] + 2 * nout]
            zt = (z - m) / np.sqrt(v + eps)
            g = theta[g_off[l] : g_off[l] + nout]
            q = theta[s_off[l] : s_off[l] + nout]
            u = g * zt + q
            ztil.append(zt)
        else:
            u = z
            ztil.append(None)
        pre.append(u)
        a = _act(u, act_id) if l < L - 1 else u
        acts.append(a)
    return acts, pre, ztil


def forward(theta, X, widths, act_id, fscale, w_off, b_off, g_off, s_off,
            nm_off, stats, eps):
    """Network outputs (N, K) using frozen running statistics."""
    acts, _, _ = _forward_caches(theta, X, widths, act_id, fscale, w_off,
                                 b_off, g_off, s_off, nm_off, stats, eps)
    return acts[-1]


def forward_batchstats(theta, X, widths, act_id, fscale, w_off, b_off, g_off,
                       s_off, nm_off, stats, eps):
    """Forward pass normalizing by the current batch statistics.

    Returns (outputs, packed batch statistics in the ``stats`` layout).
    """
    L = len(widths) - 1
    bstats = np.zeros_like(stats)
    a = X
    for l in range(L):
        nin, nout = widths[l], widths[l + 1]
        W = _weight(theta, w_off, l, nout, nin)
        b = theta[b_off[l] : b_off[l] + nout]
        z = a @ W.T * fscale[l] + b
        if nm_off[l] >= 0:
            m = z.mean(axis=0)
            v = z.var(axis=0)
            bstats[nm_off[l] : nm_off[l] + nout] = m
            bstats[nm_off[l] + nout : nm_off[l] + 2 * nout] = v
            zt = (z - m) / np.sqrt(v + eps)
            g = theta[g_off[l] : g_off[l] + nout]
            q = theta[s_off[l] : s_off[l] + nout]
            u = g * zt + q
        else:
            u = z
        a = _act(u, act_id) if l < L - 1 else u
    return a, bstats


def jacobian(theta, X, widths, act_id, fscale, w_off, b_off, g_off, s_off,
             nm_off, stats, eps):
    """Dense per-sample Jacobian (N*K, P), reverse accumulated."""
    L = len(widths) - 1
    N = X.shape[0]
    K = widths[-1]
    P = theta.shape[0]
    acts, pre, ztil = _forward_caches(theta, X, widths, act_id, fscale,
                                      w_off, b_off, g_off, s_off, nm_off,
                                      stats, eps)
    J = np.zeros((N, K, P))
    G = np.broadcast_to(np.eye(K), (N, K, K)).copy()  # d out / d u_l
    for l in range(L - 1, -1, -1):
        nin, nout = widths[l], widths[l + 1]
        if nm_off[l] >= 0:
            v = stats[nm_off[l] + nout : nm_off[l] + 2 * nout]
            g = theta[g_off[l] : g_off[l] + nout]
            J[:, :, g_off[l] : g_off[l] + nout] = G * ztil[l + 1][:, None, :]
            J[:, :, s_off[l] : s_off[l] + nout] = G
            dz = G * (g / np.sqrt(v + eps))[None, None, :]
        else:
            dz = G
        J[:, :, b_off[l] : b_off[l] + nout] = dz
        dw = dz[:, :, :, None] * acts[l][:, None, None, :] * fscale[l]
        J[:, :, w_off[l] : w_off[l] + nout * nin] = dw.reshape(N, K, nout * nin)
        if l > 0:
            W = _weight(theta, w_off, l, nout, nin)
            G = (dz @ W) * fscale[l]
            G = G * _actp(pre[l], act_id)[:, None, :]
    return J.reshape(N * K, P)


def vjp(theta, X, Z, widths, act_id, fscale, w_off, b_off, g_off, s_off,
        nm_off, stats, eps):
    """Vector-Jacobian product: (P,) = sum_{n,k} Z[n,k] * dout[n,k]/dtheta."""
    L = len(widths) - 1
    grad = np.zeros(theta.shape[0])
    acts, pre, ztil = _forward_caches(theta, X, widths, act_id, fscale,
                                      w_off, b_off, g_off, s_off, nm_off,
                                      stats, eps)
    G = np.asarray(Z, dtype=np.float64)
    for l in range(L - 1, -1, -1):
        nin, nout = widths[l], widths[l + 1]
        if nm_off[l] >= 0:
            v = stats[nm_off[l] + nout : nm_off[l] + 2 * nout]
            g = theta[g_off[l] : g_off[l] + nout]
            grad[g_off[l] : g_off[l] + nout] = (G * ztil[l + 1]).sum(axis=0)
            grad[s_off[l] : s_off[l] + nout] = G.sum(axis=0)
            dz = G * (g / np.sqrt(v + eps))
        else:
            dz = G
        grad[b_off[l] : b_off[l] + nout] = dz.sum(axis=0)
        gw = dz.T @ acts[l] * fscale[l]
        grad[w_off[l] : w_off[l] + nout * nin] = gw.reshape(-1)
        if l > 0:
            W = _weight(theta, w_off, l, nout, nin)
            G = (dz @ W) * fscale[l]
            G = G * _actp(pre[l], act_id)
    return grad


def jvp(theta, X, tangent, widths, act_id, fscale, w_off, b_off, g_off, s_off,
        nm_off, stats, eps):
    """Jacobian-vector product: (N, K) directional derivative along tangent."""
    L = len(widths) - 1
    a = X
    at = np.zeros_like(X)
    for l in range(L):
        nin, nout = widths[l], widths[l + 1]
        W = _weight(theta, w_off, l, nout, nin)
        Wt = _weight(tangent, w_off, l, nout, nin)
        b_t = tangent[b_off[l] : b_off[l] + nout]
        z = a @ W.T * fscale[l] + theta[b_off[l] : b_off[l] + nout]
        zt_dot = (a @ Wt.T + at @ W.T) * fscale[l] + b_t
        if nm_off[l] >= 0:
            m = stats[nm_off[l] : nm_off[l] + nout]
            v = stats[nm_off[l] + nout : nm_off[l] + 2 * nout]
            inv = 1.0 / np.sqrt(v + eps)
            zhat = (z - m) * inv
            zhat_dot = zt_dot * inv
            g = theta[g_off[l] : g_off[l] + nout]
            u = g * zhat + theta[s_off[l] : s_off[l] + nout]
            ut = (tangent[g_off[l] : g_off[l] + nout] * zhat + g * zhat_dot
                  + tangent[s_off[l] : s_off[l] + nout])
        else:
            u = z
            ut = zt_dot
        if l < L - 1:
            a = _act(u, act_id)
            at = _actp(u, act_id) * ut
        else:
            a = u
            at = ut
    return at


def loss_grad_batchstats(theta, X, Y, widths, act_id, fscale, w_off, b_off,
                         g_off, s_off, nm_off, stats, eps):
    """Gradient of mean_n 0.5*||f(x_n) - y_n||^2 under batch statistics.

    Differentiates through the batch mean/variance (training-mode
    normalization). Returns (grad (P,), loss, packed batch statistics).
    """
    L = len(widths) - 1
    N = X.shape[0]
    grad = np.zeros(theta.shape[0])
    bstats = np.zeros_like(stats)
    a = X
    acts = [X]
    pre = [None]
    ztil = [None]
    for l in range(L):
        nin, nout = widths[l], widths[l + 1]
        W = _weight(theta, w_off, l, nout, nin)
        b = theta[b_off[l] : b_off[l] + nout]
        z = a @ W.T * fscale[l] + b
        if nm_off[l] >= 0:
            m = z.mean(axis=0)
            v = z.var(axis=0)
            bstats[nm_off[l] : nm_off[l] + nout] = m
            bstats[nm_off[l] + nout : nm_off[l] + 2 * nout] = v
            zt = (z - m) / np.sqrt(v + eps)
            g = theta[g_off[l] : g_off[l] + nout]
            u = g * zt + theta[s_off[l] : s_off[l] + nout]
            ztil.append(zt)
        else:
            u = z
            ztil.append(None)
        pre.append(u)
        a = _act(u, act_id) if l < L - 1 else u
        acts.append(a)
    resid = a - Y
    loss = 0.5 * float((resid * resid).sum()) / N
    G = resid / N
    for l in range(L - 1, -1, -1):
        nin, nout = widths[l], widths[l + 1]
        if nm_off[l] >= 0:
            v = bstats[nm_off[l] + nout : nm_off[l] + 2 * nout]
            g = theta[g_off[l] : g_off[l] + nout]
            zt = ztil[l + 1]
            grad[g_off[l] : g_off[l] + nout] = (G * zt).sum(axis=0)
            grad[s_off[l] : s_off[l] + nout] = G.sum(axis=0)
            dzt = G * g
            inv = 1.0 / np.sqrt(v + eps)
            dz = inv * (dzt - dzt.mean(axis=0) - zt * (dzt * zt).mean(axis=0))
        else:
            dz = G
        grad[b_off[l] : b_off[l] + nout] = dz.sum(axis=0)
        gw = dz.T @ acts[l] * fscale[l]
        grad[w_off[l] : w_off[l] + nout * nin] = gw.reshape(-1)
        if l > 0:
            W = _weight(theta, w_off, l, nout, nin)
            G = (dz @ W) * fscale[l]
            G = G * _actp(pre[l], act_id)
    return grad, loss, bstats
