"""Gaussian posteriors over connectivity and parameter space.

Two flavors of linearized posterior share one construction, differing
only in which Jacobian enters the Gauss-Newton term:

* LL uses the raw parameter Jacobian (isotropic damping I/alpha^2),
* CL uses the connectivity Jacobian J diag(theta), equivalent to
  scale-matched damping diag(theta)^-2/alpha^2 in parameter space.

Sampling uses the randomize-then-optimize identity: perturb the data
with observation noise, perturb the prior anchor, and solve the
regularized least-squares problem exactly; the minimizers are i.i.d.
draws from the closed-form posterior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from ctklab.nets import NetworkSpec, NormState, ParamVector, forward, linearized_predict

#: largest P for which a dense P x P covariance is materialized
DENSE_COV_LIMIT = 2000

#: smallest jitter ever added to a train-train kernel before inversion
JITTER_FLOOR = 1e-10


@dataclass
class GaussianPosterior:
    """Mean and dense covariance of a linearized posterior."""

    space: str          # "connectivity" | "parameter"
    mean: np.ndarray    # (P,)
    cov: np.ndarray     # (P, P)
    flavor: str         # "CL" | "LL"
    alpha: float
    sigma: float

    def __post_init__(self):
        if self.space not in ("connectivity", "parameter"):
            raise ValueError(f"unknown posterior space {self.space!r}")
        if self.flavor not in ("CL", "LL"):
            raise ValueError(f"unknown posterior flavor {self.flavor!r}")


def _spd_inverse(precision: np.ndarray) -> np.ndarray:
    c, low = cho_factor(precision)
    return cho_solve((c, low), np.eye(precision.shape[0]))


def posterior_connectivity(j_c: np.ndarray, residual: np.ndarray,
                           alpha: float, sigma: float) -> GaussianPosterior:
    """Exact Bayesian linear-regression posterior over the connectivity
    perturbation: N(mu, (I/a^2 + J_c^T J_c/s^2)^{-1})."""
    J = np.atleast_2d(np.asarray(j_c, dtype=np.float64))
    r = np.asarray(residual, dtype=np.float64).reshape(-1)
    p = J.shape[1]
    if p > DENSE_COV_LIMIT:
        raise ValueError(f"dense covariance limited to P <= {DENSE_COV_LIMIT}")
    precision = np.eye(p) / alpha**2 + J.T @ J / sigma**2
    cov = _spd_inverse(precision)
    mean = cov @ (J.T @ r) / sigma**2
    return GaussianPosterior(space="connectivity", mean=mean, cov=cov,
                             flavor="CL", alpha=alpha, sigma=sigma)


def posterior_parameter(qc: GaussianPosterior,
                        theta: np.ndarray | ParamVector) -> GaussianPosterior:
    """Affine pushforward psi = theta + theta * c of a connectivity posterior.

    Coordinates with theta_j = 0 stay frozen at theta_j with zero
    variance (they are excluded from connectivity space).
    """
    if qc.space != "connectivity":
        raise ValueError("expected a connectivity-space posterior")
    t = theta.values if isinstance(theta, ParamVector) else np.asarray(theta)
    mean = t + t * qc.mean
    cov = t[:, None] * qc.cov * t[None, :]
    return GaussianPosterior(space="parameter", mean=mean, cov=cov,
                             flavor=qc.flavor, alpha=qc.alpha, sigma=qc.sigma)


def ll_posterior(j_params: np.ndarray, theta_star: np.ndarray | ParamVector,
                 alpha: float, sigma: float) -> GaussianPosterior:
    """Linearized posterior N(theta*, (I/a^2 + J^T J/s^2)^{-1})."""
    J = np.atleast_2d(np.asarray(j_params, dtype=np.float64))
    t = theta_star.values if isinstance(theta_star, ParamVector) else np.asarray(theta_star)
    p = J.shape[1]
    if p > DENSE_COV_LIMIT:
        raise ValueError(f"dense covariance limited to P <= {DENSE_COV_LIMIT}")
    precision = np.eye(p) / alpha**2 + J.T @ J / sigma**2
    return GaussianPosterior(space="parameter", mean=np.asarray(t, dtype=np.float64),
                             cov=_spd_inverse(precision), flavor="LL",
                             alpha=alpha, sigma=sigma)


@dataclass
class PredictiveDistribution:
    """Per-test-point Gaussian over the K outputs."""

    mean: np.ndarray        # (N*, K)
    cov: np.ndarray         # (N*, K, K)
    jitter: float
    kernel_cond: float

    def diag_variance(self) -> np.ndarray:
        return np.einsum("nkk->nk", self.cov)

    def variance_scores(self) -> np.ndarray:
        """Total output variance per point (the OOD ranking score)."""
        return np.einsum("nkk->n", self.cov)


def predictive(flavor: str, j_train: np.ndarray, j_test: np.ndarray,
               f_test: np.ndarray, alpha: float, sigma: float,
               theta: np.ndarray | ParamVector | None = None,
               mask: np.ndarray | None = None,
               form: str = "exact") -> PredictiveDistribution:
    """Kernel-space predictive distribution of the linearized model.

    mean = f(x, theta*); covariance per test point
    a^2 K_xx - a^2 K_xT (K_TT + jitter I)^{-1} K_Tx, with K the tangent
    kernel ("LL") or connectivity kernel ("CL"), optionally restricted to
    a parameter mask. ``form="exact"`` uses jitter sigma^2/alpha^2 (the
    weight-space posterior exactly); ``form="limit"`` uses the vanishing
    noise limit with a small conditioning floor.
    """
    if flavor not in ("CL", "LL"):
        raise ValueError(f"unknown flavor {flavor!r}")
    if form not in ("exact", "limit"):
        raise ValueError(f"unknown form {form!r}")
    Jt = np.atleast_2d(np.asarray(j_train, dtype=np.float64))
    Js = np.atleast_2d(np.asarray(j_test, dtype=np.float64))
    f_test = np.atleast_2d(np.asarray(f_test, dtype=np.float64))
    K = f_test.shape[1]
    if flavor == "CL":
        if theta is None:
            raise ValueError("CL predictive needs theta")
        t = theta.values if isinstance(theta, ParamVector) else np.asarray(theta)
        Jt = Jt * t[None, :]
        Js = Js * t[None, :]
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        Jt = Jt * m[None, :]
        Js = Js * m[None, :]
    Ktt = Jt @ Jt.T
    Kst = Js @ Jt.T
    if form == "exact":
        jitter = max(sigma**2 / alpha**2, JITTER_FLOOR)
    else:
        # floor scales with the kernel so the limit form commutes with
        # multiplicative kernel rescalings
        mean_diag = float(np.mean(np.diag(Ktt)))
        jitter = JITTER_FLOOR * mean_diag if mean_diag > 0 else JITTER_FLOOR
    A = Ktt + jitter * np.eye(Ktt.shape[0])
    eigs = np.linalg.eigvalsh(A)
    cond = float(eigs[-1] / max(eigs[0], 1e-300))
    c, low = cho_factor(A)
    solved = cho_solve((c, low), Kst.T)   # (NK_train, N*K)
    n_test = Js.shape[0] // K
    cov = np.empty((n_test, K, K))
    for i in range(n_test):
        rows = slice(i * K, (i + 1) * K)
        Kss = Js[rows] @ Js[rows].T
        cov[i] = alpha**2 * (Kss - Kst[rows] @ solved[:, rows])
    return PredictiveDistribution(mean=f_test, cov=cov, jitter=jitter,
                                  kernel_cond=cond)


def rto_sample(j_matrix: np.ndarray, residual: np.ndarray, alpha: float,
               sigma: float, seed: int, n_samples: int) -> np.ndarray:
    """Exact posterior draws by randomize-then-optimize.

    Per sample: draw noise eps ~ N(0, s^2 I) on the outputs and an anchor
    c0 ~ N(0, a^2 I) on the coefficients, then solve

        argmin_c ||r + eps - J c||^2 / (2 s^2) + ||c - c0||^2 / (2 a^2)

    exactly (one Cholesky solve; the dual form is used when P exceeds
    the row count). Sample i uses RNG stream (seed, i), so any execution
    order reproduces the identical sample set.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    J = np.atleast_2d(np.asarray(j_matrix, dtype=np.float64))
    r = np.asarray(residual, dtype=np.float64).reshape(-1)
    nk, p = J.shape
    lam = sigma**2 / alpha**2
    primal = p <= nk
    if primal:
        c, low = cho_factor(J.T @ J + lam * np.eye(p))
    else:
        c, low = cho_factor(J @ J.T + lam * np.eye(nk))
    out = np.empty((n_samples, p))
    for i in range(n_samples):
        rng = np.random.default_rng([seed, i])
        eps = rng.standard_normal(nk) * sigma
        c0 = rng.standard_normal(p) * alpha
        y = r + eps
        if primal:
            out[i] = cho_solve((c, low), J.T @ y + lam * c0)
        else:
            out[i] = c0 + J.T @ cho_solve((c, low), y - J @ c0)
    return out


def ensemble_predict(samples: np.ndarray, spec: NetworkSpec,
                     params: ParamVector, norm: NormState | None,
                     X: np.ndarray, mode: str = "linearized",
                     label_smoothing: float = 0.01,
                     space: str = "connectivity") -> tuple[np.ndarray, np.ndarray]:
    """Average smoothed one-hot member predictions and score output spread.

    Each posterior draw predicts through the linearized model (or the
    full forward pass at the perturbed parameters); its classification
    vote is a one-hot with label smoothing s: 1 - s + s/K on the argmax
    class, s/K elsewhere. Returns (mean probabilities (N, K), per-point
    output variance (N,), the OOD score).
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    S = samples.shape[0]
    if S < 1:
        raise ValueError("need at least one ensemble member")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    N, K = X.shape[0], spec.output_dim
    outputs = np.empty((S, N, K))
    for i, c in enumerate(samples):
        if mode == "linearized":
            outputs[i] = linearized_predict(spec, params, norm, c, X, space=space)
        elif mode == "full_forward":
            delta = params.values * c if space == "connectivity" else c
            perturbed = ParamVector(params.values + delta, spec)
            outputs[i] = forward(spec, perturbed, norm, X)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    votes = np.full((S, N, K), label_smoothing / K)
    top = np.argmax(outputs, axis=2)
    s_idx, n_idx = np.meshgrid(np.arange(S), np.arange(N), indexing="ij")
    votes[s_idx, n_idx, top] = 1.0 - label_smoothing + label_smoothing / K
    probs = votes.mean(axis=0)
    variance = outputs.var(axis=0, ddof=0).sum(axis=1)
    return probs, variance
