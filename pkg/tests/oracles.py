"""Independent oracles shared across test modules.

These deliberately avoid the library's own differentiation paths: finite
differences, explicit dense linear algebra and brute-force enumeration.
"""

from __future__ import annotations

import numpy as np

from ctklab import nets


def fd_jacobian(spec, params, norm, X, h=1e-6):
    """Central finite-difference Jacobian, (N*K, P)."""
    P = params.n_params
    N = np.atleast_2d(X).shape[0]
    K = spec.output_dim
    J = np.zeros((N * K, P))
    for j in range(P):
        tp = params.copy()
        tp.values[j] += h
        tm = params.copy()
        tm.values[j] -= h
        diff = nets.forward(spec, tp, norm, X) - nets.forward(spec, tm, norm, X)
        J[:, j] = diff.reshape(-1) / (2.0 * h)
    return J


def fd_gradient(fun, x0, h=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x0 = np.asarray(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    for j in range(x0.size):
        xp = x0.copy()
        xp[j] += h
        xm = x0.copy()
        xm[j] -= h
        g[j] = (fun(xp) - fun(xm)) / (2.0 * h)
    return g


def gaussian_kl(mu_q, cov_q, mu_p, cov_p):
    """KL(N(mu_q, cov_q) || N(mu_p, cov_p)) by the explicit dense formula."""
    p = len(mu_q)
    cov_p_inv = np.linalg.inv(cov_p)
    d = mu_q - mu_p
    term_tr = np.trace(cov_p_inv @ cov_q)
    term_mean = d @ cov_p_inv @ d
    _, logdet_p = np.linalg.slogdet(cov_p)
    _, logdet_q = np.linalg.slogdet(cov_q)
    return 0.5 * (term_tr + term_mean - p + logdet_p - logdet_q)


def kendall_tau_enumerate(x, y):
    """Brute-force tau-a by explicit pair enumeration."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    score = 0
    for i in range(n):
        for j in range(i + 1, n):
            score += np.sign(x[i] - x[j]) * np.sign(y[i] - y[j])
    return score / (n * (n - 1) / 2)


def auroc_enumerate(scores_in, scores_out):
    """Brute-force pairwise AUROC with half-credit ties."""
    wins = 0.0
    for o in scores_out:
        for i in scores_in:
            if o > i:
                wins += 1.0
            elif o == i:
                wins += 0.5
    return wins / (len(scores_in) * len(scores_out))


def random_normalized_relu_net(widths=(4, 16, 12, 3), normalize=(1,), seed=0,
                               scheme="he", stat_seed=None):
    """A ReLU net with normalization and non-trivial frozen statistics."""
    spec = nets.NetworkSpec(tuple(widths), activation="relu",
                            normalize_after=frozenset(normalize),
                            init_scheme=scheme)
    params = nets.init_params(spec, seed)
    norm = nets.NormState.fresh(spec)
    rng = np.random.default_rng(seed + 1000 if stat_seed is None else stat_seed)
    for l in sorted(spec.normalize_after):
        w = spec.layer_widths[l]
        norm.running_mean[l] = 0.3 * rng.standard_normal(w)
        norm.running_var[l] = 0.5 + rng.random(w)
    return spec, params, norm
