"""Numba-jitted implementations of the hot network kernels.

Per-sample loop versions of the functions in
:mod:`ctklab._kernels_numpy`; see that module for the shared calling
convention. Selected by :mod:`ctklab.backend` unless disabled via the
CTKLAB_DISABLE_NUMBA / NUMBA_DISABLE_JIT environment flags.

The two backends agree to float64 rounding (~1e-14 relative); exact bit
patterns may differ because BLAS reduction order differs from the loops
here.
"""

from __future__ import annotations

import numpy as np
from numba import njit

BACKEND = "numba"

_OPTS = {"cache": True, "fastmath": False}


@njit(**_OPTS)
def _act1(u, act_id):
    if act_id == 0:
        return u if u > 0.0 else 0.0
    elif act_id == 1:
        return np.tanh(u)
    return u


@njit(**_OPTS)
def _actp1(u, act_id):
    if act_id == 0:
        return 1.0 if u > 0.0 else 0.0
    elif act_id == 1:
        t = np.tanh(u)
        return 1.0 - t * t
    return 1.0


@njit(**_OPTS)
def _maxwidth(widths):
    m = 0
    for l in range(widths.shape[0]):
        if widths[l] > m:
            m = widths[l]
    return m


@njit(**_OPTS)
def _forward_sample(theta, x, a, z, widths, act_id, fscale, w_off, b_off,
                    g_off, s_off, nm_off, stats, eps):
    """One sample forward into scratch buffers; final outputs left in z."""
    L = widths.shape[0] - 1
    for j in range(widths[0]):
        a[j] = x[j]
    for l in range(L):
        nin = widths[l]
        nout = widths[l + 1]
        wo = w_off[l]
        s = fscale[l]
        for i in range(nout):
            acc = 0.0
            base = wo + i * nin
            for j in range(nin):
                acc += theta[base + j] * a[j]
            z[i] = s * acc + theta[b_off[l] + i]
        no = nm_off[l]
        if no >= 0:
            for i in range(nout):
                zt = (z[i] - stats[no + i]) / np.sqrt(stats[no + nout + i] + eps)
                z[i] = theta[g_off[l] + i] * zt + theta[s_off[l] + i]
        if l < L - 1:
            for i in range(nout):
                a[i] = _act1(z[i], act_id)
    return z


@njit(**_OPTS)
def forward(theta, X, widths, act_id, fscale, w_off, b_off, g_off, s_off,
            nm_off, stats, eps):
    L = widths.shape[0] - 1
    N = X.shape[0]
    K = widths[L]
    maxw = _maxwidth(widths)
    out = np.empty((N, K))
    a = np.empty(maxw)
    z = np.empty(maxw)
    for n in range(N):
        _forward_sample(theta, X[n], a, z, widths, act_id, fscale, w_off,
                        b_off, g_off, s_off, nm_off, stats, eps)
        for k in range(K):
            out[n, k] = z[k]
    return out


@njit(**_OPTS)
def _forward_layers(theta, X, A, U, ZT, widths, act_id, fscale, w_off, b_off,
                    g_off, s_off, nm_off, stats, eps, n):
    """Forward for sample n, caching activations (A), pre-activations (U)
    and normalized values (ZT) per layer for the backward sweeps."""
    L = widths.shape[0] - 1
    for j in range(widths[0]):
        A[0, j] = X[n, j]
    for l in range(L):
        nin = widths[l]
        nout = widths[l + 1]
        wo = w_off[l]
        s = fscale[l]
        no = nm_off[l]
        for i in range(nout):
            acc = 0.0
            base = wo + i * nin
            for j in range(nin):
                acc += theta[base + j] * A[l, j]
            zi = s * acc + theta[b_off[l] + i]
            if no >= 0:
                zt = (zi - stats[no + i]) / np.sqrt(stats[no + nout + i] + eps)
                ZT[l + 1, i] = zt
                u = theta[g_off[l] + i] * zt + theta[s_off[l] + i]
            else:
                u = zi
            U[l + 1, i] = u
            if l < L - 1:
                A[l + 1, i] = _act1(u, act_id)
            else:
                A[l + 1, i] = u


@njit(**_OPTS)
def _backward_row(theta, row, J, A, U, ZT, G, Gp, DZ, widths, act_id, fscale,
                  w_off, b_off, g_off, s_off, nm_off, stats, eps):
    """Reverse sweep for one (sample, output) pair; G holds the seed."""
    L = widths.shape[0] - 1
    for l in range(L - 1, -1, -1):
        nin = widths[l]
        nout = widths[l + 1]
        no = nm_off[l]
        for i in range(nout):
            du = G[i]
            if no >= 0:
                J[row, g_off[l] + i] = du * ZT[l + 1, i]
                J[row, s_off[l] + i] = du
                dz = du * theta[g_off[l] + i] / np.sqrt(stats[no + nout + i] + eps)
            else:
                dz = du
            DZ[i] = dz
            J[row, b_off[l] + i] = dz
        s = fscale[l]
        wo = w_off[l]
        for i in range(nout):
            dzs = DZ[i] * s
            base = wo + i * nin
            for j in range(nin):
                J[row, base + j] = dzs * A[l, j]
        if l > 0:
            for j in range(nin):
                Gp[j] = 0.0
            for i in range(nout):
                dzs = DZ[i] * s
                base = wo + i * nin
                for j in range(nin):
                    Gp[j] += dzs * theta[base + j]
            for j in range(nin):
                G[j] = Gp[j] * _actp1(U[l, j], act_id)


@njit(**_OPTS)
def jacobian(theta, X, widths, act_id, fscale, w_off, b_off, g_off, s_off,
             nm_off, stats, eps):
    L = widths.shape[0] - 1
    N = X.shape[0]
    K = widths[L]
    P = theta.shape[0]
    maxw = _maxwidth(widths)
    J = np.zeros((N * K, P))
    A = np.empty((L + 1, maxw))
    U = np.empty((L + 1, maxw))
    ZT = np.empty((L + 1, maxw))
    G = np.empty(maxw)
    Gp = np.empty(maxw)
    DZ = np.empty(maxw)
    for n in range(N):
        _forward_layers(theta, X, A, U, ZT, widths, act_id, fscale, w_off,
                        b_off, g_off, s_off, nm_off, stats, eps, n)
        for k in range(K):
            for i in range(K):
                G[i] = 1.0 if i == k else 0.0
            _backward_row(theta, n * K + k, J, A, U, ZT, G, Gp, DZ, widths,
                          act_id, fscale, w_off, b_off, g_off, s_off, nm_off,
                          stats, eps)
    return J


@njit(**_OPTS)
def vjp(theta, X, Z, widths, act_id, fscale, w_off, b_off, g_off, s_off,
        nm_off, stats, eps):
    L = widths.shape[0] - 1
    N = X.shape[0]
    P = theta.shape[0]
    maxw = _maxwidth(widths)
    grad = np.zeros(P)
    A = np.empty((L + 1, maxw))
    U = np.empty((L + 1, maxw))
    ZT = np.empty((L + 1, maxw))
    G = np.empty(maxw)
    Gp = np.empty(maxw)
    DZ = np.empty(maxw)
    for n in range(N):
        _forward_layers(theta, X, A, U, ZT, widths, act_id, fscale, w_off,
                        b_off, g_off, s_off, nm_off, stats, eps, n)
        for i in range(widths[L]):
            G[i] = Z[n, i]
        for l in range(L - 1, -1, -1):
            nin = widths[l]
            nout = widths[l + 1]
            no = nm_off[l]
            for i in range(nout):
                du = G[i]
                if no >= 0:
                    grad[g_off[l] + i] += du * ZT[l + 1, i]
                    grad[s_off[l] + i] += du
                    dz = du * theta[g_off[l] + i] / np.sqrt(stats[no + nout + i] + eps)
                else:
                    dz = du
                DZ[i] = dz
                grad[b_off[l] + i] += dz
            s = fscale[l]
            wo = w_off[l]
            for i in range(nout):
                dzs = DZ[i] * s
                base = wo + i * nin
                for j in range(nin):
                    grad[base + j] += dzs * A[l, j]
            if l > 0:
                for j in range(nin):
                    Gp[j] = 0.0
                for i in range(nout):
                    dzs = DZ[i] * s
                    base = wo + i * nin
                    for j in range(nin):
                        Gp[j] += dzs * theta[base + j]
                for j in range(nin):
                    G[j] = Gp[j] * _actp1(U[l, j], act_id)
    return grad


@njit(**_OPTS)
def jvp(theta, X, tangent, widths, act_id, fscale, w_off, b_off, g_off,
        s_off, nm_off, stats, eps):
    L = widths.shape[0] - 1
    N = X.shape[0]
    K = widths[L]
    maxw = _maxwidth(widths)
    out = np.empty((N, K))
    a = np.empty(maxw)
    at = np.empty(maxw)
    z = np.empty(maxw)
    zt = np.empty(maxw)
    for n in range(N):
        for j in range(widths[0]):
            a[j] = X[n, j]
            at[j] = 0.0
        for l in range(L):
            nin = widths[l]
            nout = widths[l + 1]
            wo = w_off[l]
            s = fscale[l]
            no = nm_off[l]
            for i in range(nout):
                acc = 0.0
                accd = 0.0
                base = wo + i * nin
                for j in range(nin):
                    acc += theta[base + j] * a[j]
                    accd += tangent[base + j] * a[j] + theta[base + j] * at[j]
                zi = s * acc + theta[b_off[l] + i]
                zdi = s * accd + tangent[b_off[l] + i]
                if no >= 0:
                    inv = 1.0 / np.sqrt(stats[no + nout + i] + eps)
                    zh = (zi - stats[no + i]) * inv
                    zhd = zdi * inv
                    u = theta[g_off[l] + i] * zh + theta[s_off[l] + i]
                    ud = (tangent[g_off[l] + i] * zh
                          + theta[g_off[l] + i] * zhd + tangent[s_off[l] + i])
                else:
                    u = zi
                    ud = zdi
                z[i] = u
                zt[i] = ud
            if l < L - 1:
                for i in range(nout):
                    a[i] = _act1(z[i], act_id)
                    at[i] = _actp1(z[i], act_id) * zt[i]
        for k in range(K):
            out[n, k] = zt[k]
    return out


@njit(**_OPTS)
def forward_batchstats(theta, X, widths, act_id, fscale, w_off, b_off, g_off,
                       s_off, nm_off, stats, eps):
    L = widths.shape[0] - 1
    N = X.shape[0]
    K = widths[L]
    maxw = _maxwidth(widths)
    bstats = np.zeros(stats.shape[0])
    A = np.empty((N, maxw))
    Z = np.empty((N, maxw))
    for n in range(N):
        for j in range(widths[0]):
            A[n, j] = X[n, j]
    for l in range(L):
        nin = widths[l]
        nout = widths[l + 1]
        wo = w_off[l]
        s = fscale[l]
        no = nm_off[l]
        for n in range(N):
            for i in range(nout):
                acc = 0.0
                base = wo + i * nin
                for j in range(nin):
                    acc += theta[base + j] * A[n, j]
                Z[n, i] = s * acc + theta[b_off[l] + i]
        if no >= 0:
            for i in range(nout):
                m = 0.0
                for n in range(N):
                    m += Z[n, i]
                m /= N
                v = 0.0
                for n in range(N):
                    d = Z[n, i] - m
                    v += d * d
                v /= N
                bstats[no + i] = m
                bstats[no + nout + i] = v
                inv = 1.0 / np.sqrt(v + eps)
                gi = theta[g_off[l] + i]
                qi = theta[s_off[l] + i]
                for n in range(N):
                    Z[n, i] = gi * (Z[n, i] - m) * inv + qi
        if l < L - 1:
            for n in range(N):
                for i in range(nout):
                    A[n, i] = _act1(Z[n, i], act_id)
        else:
            for n in range(N):
                for i in range(nout):
                    A[n, i] = Z[n, i]
    out = np.empty((N, K))
    for n in range(N):
        for k in range(K):
            out[n, k] = A[n, k]
    return out, bstats


@njit(**_OPTS)
def loss_grad_batchstats(theta, X, Y, widths, act_id, fscale, w_off, b_off,
                         g_off, s_off, nm_off, stats, eps):
    L = widths.shape[0] - 1
    N = X.shape[0]
    P = theta.shape[0]
    maxw = _maxwidth(widths)
    grad = np.zeros(P)
    bstats = np.zeros(stats.shape[0])
    A = np.empty((L + 1, N, maxw))
    U = np.empty((L + 1, N, maxw))
    ZT = np.empty((L + 1, N, maxw))
    for n in range(N):
        for j in range(widths[0]):
            A[0, n, j] = X[n, j]
    # forward with batch statistics
    for l in range(L):
        nin = widths[l]
        nout = widths[l + 1]
        wo = w_off[l]
        s = fscale[l]
        no = nm_off[l]
        for n in range(N):
            for i in range(nout):
                acc = 0.0
                base = wo + i * nin
                for j in range(nin):
                    acc += theta[base + j] * A[l, n, j]
                U[l + 1, n, i] = s * acc + theta[b_off[l] + i]
        if no >= 0:
            for i in range(nout):
                m = 0.0
                for n in range(N):
                    m += U[l + 1, n, i]
                m /= N
                v = 0.0
                for n in range(N):
                    d = U[l + 1, n, i] - m
                    v += d * d
                v /= N
                bstats[no + i] = m
                bstats[no + nout + i] = v
                inv = 1.0 / np.sqrt(v + eps)
                gi = theta[g_off[l] + i]
                qi = theta[s_off[l] + i]
                for n in range(N):
                    zt = (U[l + 1, n, i] - m) * inv
                    ZT[l + 1, n, i] = zt
                    U[l + 1, n, i] = gi * zt + qi
        for n in range(N):
            for i in range(nout):
                if l < L - 1:
                    A[l + 1, n, i] = _act1(U[l + 1, n, i], act_id)
                else:
                    A[l + 1, n, i] = U[l + 1, n, i]
    K = widths[L]
    loss = 0.0
    G = np.empty((N, maxw))
    Gp = np.empty((N, maxw))
    DZ = np.empty((N, maxw))
    for n in range(N):
        for k in range(K):
            r = A[L, n, k] - Y[n, k]
            loss += 0.5 * r * r
            G[n, k] = r / N
    loss /= N
    # backward through batch statistics
    for l in range(L - 1, -1, -1):
        nin = widths[l]
        nout = widths[l + 1]
        wo = w_off[l]
        s = fscale[l]
        no = nm_off[l]
        if no >= 0:
            for i in range(nout):
                gi = theta[g_off[l] + i]
                dg = 0.0
                dq = 0.0
                s1 = 0.0
                s2 = 0.0
                for n in range(N):
                    du = G[n, i]
                    zt = ZT[l + 1, n, i]
                    dg += du * zt
                    dq += du
                    s1 += du * gi
                    s2 += du * gi * zt
                grad[g_off[l] + i] = dg
                grad[s_off[l] + i] = dq
                s1 /= N
                s2 /= N
                inv = 1.0 / np.sqrt(bstats[no + nout + i] + eps)
                for n in range(N):
                    DZ[n, i] = inv * (G[n, i] * gi - s1 - ZT[l + 1, n, i] * s2)
        else:
            for n in range(N):
                for i in range(nout):
                    DZ[n, i] = G[n, i]
        for i in range(nout):
            db = 0.0
            for n in range(N):
                db += DZ[n, i]
            grad[b_off[l] + i] = db
            base = wo + i * nin
            for j in range(nin):
                gw = 0.0
                for n in range(N):
                    gw += DZ[n, i] * A[l, n, j]
                grad[base + j] = gw * s
        if l > 0:
            for n in range(N):
                for j in range(nin):
                    Gp[n, j] = 0.0
                for i in range(nout):
                    dzs = DZ[n, i] * s
                    base = wo + i * nin
                    for j in range(nin):
                        Gp[n, j] += dzs * theta[base + j]
                for j in range(nin):
                    G[n, j] = Gp[n, j] * _actp1(U[l, n, j], act_id)
    return grad, loss, bstats
