"""Empirical tangent kernels, sharpness measures and eigenspectra.

The two Gram matrices of interest, for the (N*K, P) parameter Jacobian J
at a trained point theta:

* tangent kernel:            J J^T
* connectivity kernel:       J diag(theta)^2 J^T

The connectivity kernel is invariant under the function-preserving
scalings in :mod:`ctklab.transforms`; its trace ("connectivity
sharpness") is the scale-invariant sharpness measure, computable
matrix-free by Hutchinson probing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ctklab.nets import Batch, NetworkSpec, NormState, ParamVector, forward, vjp_params

KERNEL_KINDS = ("ntk", "ctk", "masked_ntk", "masked_ctk")

#: relative tolerance for declaring a kernel symmetric
SYMMETRY_TOL = 1e-10
#: eigenvalues above -PSD_TOL * trace / dim count as numerical zeros
PSD_TOL = 1e-8


@dataclass
class KernelMatrix:
    """A symmetric PSD Gram matrix over the sample-major output rows."""

    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != self.values.shape[1]:
            raise ValueError("kernel must be square")

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def validate(self) -> None:
        """Check symmetry and positive semi-definiteness (numerically)."""
        v = self.values
        scale = max(np.abs(v).max(), 1e-300)
        if np.abs(v - v.T).max() > SYMMETRY_TOL * scale:
            raise ValueError("kernel is not symmetric")
        eigs = np.linalg.eigvalsh(v)
        floor = -PSD_TOL * max(np.trace(v), 0.0) / self.dim
        if eigs.min() < floor:
            raise ValueError(
                f"kernel has eigenvalue {eigs.min():.3e} below PSD floor {floor:.3e}")


@dataclass
class EigenSpectrum:
    """Eigenvalues in descending order, from a dense or Lanczos solve."""

    eigenvalues: np.ndarray
    method: str
    iterations: int

    def __post_init__(self):
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64)
        if np.any(np.diff(self.eigenvalues) > 0):
            raise ValueError("eigenvalues must be nonincreasing")


@dataclass
class TraceEstimate:
    """Hutchinson trace estimate with per-probe values."""

    value: float
    probes: int
    per_probe_values: list[float] = field(default_factory=list)
    standard_error: float = float("nan")


def empirical_ntk(j_params: np.ndarray) -> KernelMatrix:
    """Gram matrix J J^T of the parameter Jacobian."""
    J = np.asarray(j_params, dtype=np.float64)
    return KernelMatrix("ntk", J @ J.T)


def empirical_ctk(j_params: np.ndarray, theta: np.ndarray | ParamVector) -> KernelMatrix:
    """Gram matrix J diag(theta)^2 J^T; equals the NTK of J diag(theta)."""
    J = np.asarray(j_params, dtype=np.float64)
    t = theta.values if isinstance(theta, ParamVector) else np.asarray(theta)
    Jc = J * t[None, :]
    return KernelMatrix("ctk", Jc @ Jc.T)


def masked_kernel(j_params: np.ndarray, theta: np.ndarray | ParamVector,
                  mask: np.ndarray, kind: str) -> KernelMatrix:
    """Kernel restricted to a parameter subset: columns outside the mask
    are zeroed before the Gram product."""
    if kind not in ("ntk", "ctk"):
        raise ValueError("kind must be 'ntk' or 'ctk'")
    J = np.asarray(j_params, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if m.shape != (J.shape[1],):
        raise ValueError("mask length must equal the parameter count")
    if kind == "ctk":
        t = theta.values if isinstance(theta, ParamVector) else np.asarray(theta)
        Jm = J * (t * m)[None, :]
    else:
        Jm = J * m[None, :].astype(np.float64)
    return KernelMatrix("masked_" + kind, Jm @ Jm.T)


def connectivity_sharpness_exact(kernel: KernelMatrix | np.ndarray) -> float:
    """Trace of the dense connectivity kernel."""
    v = kernel.values if isinstance(kernel, KernelMatrix) else np.asarray(kernel)
    return float(np.trace(v))


def connectivity_sharpness_hutchinson(spec: NetworkSpec, params: ParamVector,
                                      norm: NormState | None, X: np.ndarray,
                                      probes: int = 64,
                                      batch_size: int | None = None,
                                      seed: int = 0) -> TraceEstimate:
    """Matrix-free trace of the connectivity kernel by Rademacher probing.

    Each probe draws an independent sign vector per minibatch, pulls it
    back through the network (one vector-Jacobian product), rescales to
    connectivity space and accumulates the squared norm. Probe RNG is
    derived from (seed, probe index), so any execution schedule
    reproduces the same estimate.
    """
    if probes < 1:
        raise ValueError("need at least one probe")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    N = X.shape[0]
    K = spec.output_dim
    bs = N if batch_size is None else min(batch_size, N)
    starts = range(0, N, bs)
    per_probe = np.empty(probes)
    for p in range(probes):
        rng = np.random.default_rng([seed, p])
        total = 0.0
        for s in starts:
            xb = X[s : s + bs]
            z = rng.integers(0, 2, size=(xb.shape[0], K)).astype(np.float64) * 2.0 - 1.0
            v = vjp_params(spec, params, norm, xb, z) * params.values
            total += float(v @ v)
        per_probe[p] = total
    value = float(per_probe.mean())
    stderr = float(per_probe.std(ddof=1) / np.sqrt(probes)) if probes > 1 else float("nan")
    return TraceEstimate(value=value, probes=probes,
                         per_probe_values=per_probe.tolist(),
                         standard_error=stderr)


def fisher_trace(spec: NetworkSpec, params: ParamVector,
                 norm: NormState | None, data: Batch,
                 loss: str = "squared") -> float:
    """Trace of the empirical Fisher: sum_n ||grad of the per-sample loss||^2."""
    if loss != "squared":
        raise ValueError("only the squared loss is supported")
    preds = forward(spec, params, norm, data.inputs)
    resid = preds - data.targets
    total = 0.0
    for n in range(data.n):
        g = vjp_params(spec, params, norm, data.inputs[n : n + 1],
                       resid[n : n + 1])
        total += float(g @ g)
    return total


def lanczos_spectrum(matvec: Callable[[np.ndarray], np.ndarray], dim: int,
                     iters: int, seed: int = 0) -> EigenSpectrum:
    """Ritz values of a symmetric operator via Lanczos iteration.

    Uses full reorthogonalization (two classical Gram-Schmidt passes), so
    iters == dim recovers the exact spectrum. On breakdown (zero residual,
    i.e. an exact invariant subspace) the converged prefix is returned.
    """
    if iters < 1 or iters > dim:
        raise ValueError("iters must lie in [1, dim]")
    rng = np.random.default_rng(seed)
    Q = np.zeros((dim, iters))
    alphas = np.zeros(iters)
    betas = np.zeros(max(iters - 1, 0))
    q = rng.standard_normal(dim)
    q /= np.linalg.norm(q)
    Q[:, 0] = q
    u = np.asarray(matvec(q), dtype=np.float64)
    alphas[0] = q @ u
    r = u - alphas[0] * q
    k = 1
    scale = max(np.abs(alphas[0]), 1.0)
    for i in range(1, iters):
        for _ in range(2):
            r = r - Q[:, :i] @ (Q[:, :i].T @ r)
        beta = np.linalg.norm(r)
        if beta <= 1e-14 * scale:
            break
        q = r / beta
        Q[:, i] = q
        u = np.asarray(matvec(q), dtype=np.float64)
        alphas[i] = q @ u
        betas[i - 1] = beta
        r = u - alphas[i] * q - beta * Q[:, i - 1]
        scale = max(scale, np.abs(alphas[i]), beta)
        k = i + 1
    T = np.diag(alphas[:k])
    if k > 1:
        T += np.diag(betas[: k - 1], 1) + np.diag(betas[: k - 1], -1)
    ritz = np.linalg.eigvalsh(T)[::-1]
    return EigenSpectrum(eigenvalues=ritz, method="lanczos", iterations=k)


def dense_spectrum(kernel: KernelMatrix | np.ndarray) -> EigenSpectrum:
    """Exact descending eigenvalues of a dense symmetric matrix."""
    v = kernel.values if isinstance(kernel, KernelMatrix) else np.asarray(kernel)
    eigs = np.linalg.eigvalsh(v)[::-1]
    return EigenSpectrum(eigenvalues=eigs, method="dense", iterations=v.shape[0])


def kernel_spectrum(kernel: KernelMatrix, dense_limit: int = 2000,
                    lanczos_iters: int = 100,
                    seed: int = 0) -> tuple[EigenSpectrum, bool]:
    """Spectrum for bound computation: dense up to ``dense_limit`` rows,
    otherwise Lanczos with min(lanczos_iters, dim) iterations.

    Returns (spectrum, truncated); a truncated spectrum omits trailing
    eigenvalues, which downstream bound code treats as zeros.
    """
    if kernel.dim <= dense_limit:
        return dense_spectrum(kernel), False
    iters = min(lanczos_iters, kernel.dim)
    spec = lanczos_spectrum(lambda v: kernel.values @ v, kernel.dim, iters, seed)
    return spec, True


def kernel_to_csv(kernel: KernelMatrix, path) -> None:
    """Write the kernel entries as plain CSV (one row per line)."""
    np.savetxt(path, kernel.values, delimiter=",")
