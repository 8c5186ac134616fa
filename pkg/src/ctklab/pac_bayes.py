"""KL decomposition and the data-dependent PAC-Bayes bound.

For a Gaussian prior N(0, alpha^2 I) and the regression posterior built
from a Jacobian J and residual r (see :mod:`ctklab.laplace`), the KL
divergence splits into

* a perturbation term  mu^T mu / (2 alpha^2)  from the posterior mean,
* a sharpness term     0.5 * sum_i h(beta_i)  with h(x) = x - log(x) - 1,

where beta_i = sigma^2 / (sigma^2 + alpha^2 lambda_i) are the
posterior-to-prior variance ratios along the kernel eigendirections
lambda_i, padded with ones (h(1) = 0) for directions the data never
touches. The bound itself is

    err <= empirical_err
           + sqrt(mu^T mu/(4 a^2 N) + sum_i h(beta_i)/(4 N)
                  + log(2 sqrt(N)/delta)/(2 N))

whose KL-based terms equal kl_total / (2 N); the identity is asserted at
assembly time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from ctklab import kernels as _kernels
from ctklab.nets import Batch, NetworkSpec, NormState, ParamVector, linearized_predict


class SolverError(RuntimeError):
    """Raised when an iterative linear solve fails to converge."""


@dataclass(frozen=True)
class BoundConfig:
    """Prior scale, observation noise, confidence and posterior set size."""

    alpha: float
    sigma: float
    delta_conf: float = 0.1
    n_q: int = 0

    def __post_init__(self):
        if self.alpha <= 0 or self.sigma <= 0:
            raise ValueError("alpha and sigma must be positive")
        if not 0.0 < self.delta_conf <= 1.0:
            raise ValueError("delta_conf must lie in (0, 1]")
        if self.n_q < 0:
            raise ValueError("n_q must be nonnegative")


def kl_penalty(x) -> np.ndarray | float:
    """Elementwise x - log(x) - 1; nonnegative, zero exactly at x = 1."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x <= 0):
        raise ValueError("kl_penalty requires positive arguments")
    out = x - np.log(x) - 1.0
    return float(out) if out.ndim == 0 else out


def variance_ratios(eigenvalues: np.ndarray, alpha: float, sigma: float,
                    n_params: int) -> np.ndarray:
    """Posterior/prior variance ratios sigma^2/(sigma^2 + alpha^2 lambda).

    Input eigenvalues come from a PSD kernel; small negative numerical
    zeros are clipped. The result is padded with exact ones to length
    ``n_params`` so every untouched direction contributes h(1) = 0.
    """
    lam = np.asarray(eigenvalues, dtype=np.float64)
    floor = -_kernels.PSD_TOL * max(float(lam.sum()), 0.0) / max(lam.size, 1)
    if lam.size and lam.min() < floor:
        raise ValueError(f"eigenvalue {lam.min():.3e} below PSD floor")
    lam = np.clip(lam, 0.0, None)
    if lam.size > n_params:
        # a kernel over more rows than parameters has rank <= P; the
        # surplus eigenvalues must be numerical zeros
        lam = np.sort(lam)[::-1]
        surplus = lam[n_params:]
        tol = _kernels.PSD_TOL * max(float(lam[0]), 1e-300)
        if np.any(surplus > tol):
            raise ValueError(
                "kernel rank exceeds the parameter count; eigenvalues "
                "beyond P are not numerically zero")
        lam = lam[:n_params]
    betas = np.ones(n_params)
    betas[: lam.size] = sigma**2 / (sigma**2 + alpha**2 * lam)
    return betas


def solve_posterior_mean(j_matrix: np.ndarray, residual: np.ndarray,
                         alpha: float, sigma: float,
                         method: str = "direct") -> np.ndarray:
    """Posterior mean mu = (I/a^2 + J^T J/s^2)^{-1} J^T r / s^2.

    ``direct`` solves the P x P system, switching to the dual
    (NK x NK) form when P exceeds the number of rows; ``cg`` runs
    conjugate gradients on the primal operator to relative residual
    1e-10 and raises SolverError on non-convergence.
    """
    J = np.atleast_2d(np.asarray(j_matrix, dtype=np.float64))
    r = np.asarray(residual, dtype=np.float64).reshape(-1)
    nk, p = J.shape
    if r.shape != (nk,):
        raise ValueError("residual length must match Jacobian rows")
    lam = sigma**2 / alpha**2
    if method == "direct":
        if p <= nk:
            A = J.T @ J + lam * np.eye(p)
            return np.linalg.solve(A, J.T @ r)
        G = J @ J.T + lam * np.eye(nk)
        return J.T @ np.linalg.solve(G, r)
    if method == "cg":
        def mv(v):
            return v / alpha**2 + J.T @ (J @ v) / sigma**2

        op = LinearOperator((p, p), matvec=mv)
        b = J.T @ r / sigma**2
        x, info = cg(op, b, rtol=1e-10, atol=0.0, maxiter=20 * p)
        if info != 0:
            raise SolverError(f"conjugate gradient stopped with info={info}")
        return x
    raise ValueError(f"unknown method {method!r}")


@dataclass
class KLBreakdown:
    """KL(Q || P) split into its mean and covariance contributions."""

    perturbation_term: float
    sharpness_term: float
    kl_total: float
    ratios: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"perturbation_term": self.perturbation_term,
                "sharpness_term": self.sharpness_term,
                "kl_total": self.kl_total}


def kl_decomposition(mu_q: np.ndarray, eigenvalues: np.ndarray, alpha: float,
                     sigma: float, n_params: int) -> KLBreakdown:
    """Assemble the KL divergence from the posterior mean and kernel spectrum."""
    mu = np.asarray(mu_q, dtype=np.float64)
    betas = variance_ratios(eigenvalues, alpha, sigma, n_params)
    perturbation = float(mu @ mu) / (2.0 * alpha**2)
    sharpness = 0.5 * float(np.sum(kl_penalty(betas)))
    return KLBreakdown(perturbation_term=perturbation,
                       sharpness_term=sharpness,
                       kl_total=perturbation + sharpness,
                       ratios=betas)


@dataclass
class BoundReport:
    """Empirical error plus complexity, with all intermediate terms."""

    empirical_err: float
    kl_breakdown: KLBreakdown
    complexity_term: float
    bound_value: float
    kernel_kind: str
    n_q: int
    delta_conf: float
    spectrum_truncated: bool = False

    def to_dict(self) -> dict:
        d = self.kl_breakdown.to_dict()
        d.update({"empirical_err": self.empirical_err,
                  "complexity_term": self.complexity_term,
                  "bound_value": self.bound_value,
                  "kernel_kind": self.kernel_kind,
                  "n_q": self.n_q,
                  "delta_conf": self.delta_conf,
                  "spectrum_truncated": self.spectrum_truncated})
        return d


def pac_bayes_bound(empirical_err: float, kl: KLBreakdown, n_q: int,
                    delta_conf: float, kernel_kind: str = "ctk",
                    spectrum_truncated: bool = False) -> BoundReport:
    """Plug empirical error and KL into the data-dependent bound."""
    if not 0.0 <= empirical_err <= 1.0:
        raise ValueError("empirical_err must lie in [0, 1]")
    if n_q < 1:
        raise ValueError("n_q must be positive")
    if not 0.0 < delta_conf <= 1.0:
        raise ValueError("delta_conf must lie in (0, 1]")
    conf = np.log(2.0 * np.sqrt(n_q) / delta_conf) / (2.0 * n_q)
    under_root = (kl.perturbation_term / (2.0 * n_q)
                  + kl.sharpness_term / (2.0 * n_q) + conf)
    # the two KL-derived terms must reassemble to kl_total / (2 N_Q)
    assert abs(kl.perturbation_term + kl.sharpness_term - kl.kl_total) <= 1e-10 * max(1.0, kl.kl_total)
    complexity = float(np.sqrt(under_root))
    return BoundReport(empirical_err=float(empirical_err), kl_breakdown=kl,
                       complexity_term=complexity,
                       bound_value=float(empirical_err) + complexity,
                       kernel_kind=kernel_kind, n_q=int(n_q),
                       delta_conf=float(delta_conf),
                       spectrum_truncated=spectrum_truncated)


def bound_from_jacobian(j_matrix: np.ndarray, residual: np.ndarray,
                        config: BoundConfig, empirical_err: float,
                        kernel_kind: str = "ctk", dense_limit: int = 2000,
                        lanczos_iters: int = 100, seed: int = 0) -> BoundReport:
    """Full bound pipeline from a Jacobian (connectivity or parameter).

    Solves for the posterior mean, extracts the Gram spectrum (dense up
    to ``dense_limit`` rows, Lanczos beyond), decomposes the KL and
    assembles the bound. Passing the connectivity Jacobian yields the
    scale-invariant variant; the raw parameter Jacobian yields the
    tangent-kernel variant with the identical pipeline.
    """
    J = np.atleast_2d(np.asarray(j_matrix, dtype=np.float64))
    mu = solve_posterior_mean(J, residual, config.alpha, config.sigma)
    gram = _kernels.KernelMatrix("ctk" if kernel_kind == "ctk" else "ntk",
                                 J @ J.T)
    spec, truncated = _kernels.kernel_spectrum(gram, dense_limit=dense_limit,
                                               lanczos_iters=lanczos_iters,
                                               seed=seed)
    kl = kl_decomposition(mu, spec.eigenvalues, config.alpha, config.sigma,
                          J.shape[1])
    return pac_bayes_bound(empirical_err, kl, config.n_q, config.delta_conf,
                           kernel_kind=kernel_kind,
                           spectrum_truncated=truncated)


@dataclass
class ErrorEstimate:
    mean: float
    standard_error: float
    per_sample: list[float] = field(default_factory=list)


def estimate_errors(posterior_samples: np.ndarray, spec: NetworkSpec,
                    params: ParamVector, norm: NormState | None, batch: Batch,
                    space: str = "connectivity") -> ErrorEstimate:
    """Monte-Carlo 0-1 error of linearized predictions over posterior draws.

    Each sample is a perturbation vector; predictions use the first-order
    model and classify by argmax (ties to the lowest class index).
    """
    samples = np.atleast_2d(np.asarray(posterior_samples, dtype=np.float64))
    if samples.shape[0] < 1:
        raise ValueError("need at least one posterior sample")
    labels = batch.class_labels()
    errs = np.empty(samples.shape[0])
    for i, c in enumerate(samples):
        preds = linearized_predict(spec, params, norm, c, batch.inputs,
                                   space=space)
        errs[i] = float(np.mean(np.argmax(preds, axis=1) != labels))
    stderr = float(errs.std(ddof=1) / np.sqrt(len(errs))) if len(errs) > 1 else float("nan")
    return ErrorEstimate(mean=float(errs.mean()), standard_error=stderr,
                         per_sample=errs.tolist())
