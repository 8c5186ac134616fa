"""Calibration metrics and sharpness-generalization rank correlations."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


@dataclass
class CalibrationReport:
    nll: float
    ece: float
    brier: float
    n_bins: int
    auroc_ood: float | None = None

    def to_dict(self) -> dict:
        return {"nll": self.nll, "ece": self.ece, "brier": self.brier,
                "n_bins": self.n_bins, "auroc_ood": self.auroc_ood}


@dataclass
class CorrelationReport:
    overall_tau: float
    per_axis_tau: dict[str, float]
    psi: float
    group_counts: dict[str, int] = field(default_factory=dict)
    skipped_axes: list[str] = field(default_factory=list)
    tie_policy: str = "tau_a"

    def to_dict(self) -> dict:
        return {"overall_tau": self.overall_tau,
                "per_axis_tau": self.per_axis_tau, "psi": self.psi,
                "group_counts": self.group_counts,
                "skipped_axes": self.skipped_axes,
                "tie_policy": self.tie_policy}


def _check_probs(preds: np.ndarray) -> np.ndarray:
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    if np.any(preds <= 0):
        raise ValueError("probabilities must be strictly positive "
                         "(apply a smoothing floor first)")
    if np.abs(preds.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("probability rows must sum to 1")
    return preds


def nll(preds: np.ndarray, labels: np.ndarray) -> float:
    """Classification negative log-likelihood: -mean log p[label]."""
    preds = _check_probs(preds)
    labels = np.asarray(labels, dtype=np.int64)
    return float(-np.mean(np.log(preds[np.arange(len(labels)), labels])))


def nll_gaussian(mean: np.ndarray, variance: np.ndarray,
                 targets: np.ndarray) -> float:
    """Gaussian negative log-likelihood averaged over points (summed over
    output dimensions)."""
    mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
    var = np.atleast_2d(np.asarray(variance, dtype=np.float64))
    y = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if np.any(var <= 0):
        raise ValueError("variance must be positive")
    point = 0.5 * (np.log(2.0 * np.pi * var) + (y - mean) ** 2 / var)
    return float(point.sum(axis=1).mean())


def ece(preds: np.ndarray, labels: np.ndarray, n_bins: int = 15) -> float:
    """Expected calibration error with equal-width confidence bins."""
    return ece_table(preds, labels, n_bins)[0]


def ece_table(preds: np.ndarray, labels: np.ndarray,
              n_bins: int = 15) -> tuple[float, list[dict]]:
    """ECE plus the per-bin (count, confidence, accuracy) table."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    preds = _check_probs(preds)
    labels = np.asarray(labels, dtype=np.int64)
    conf = preds.max(axis=1)
    correct = (np.argmax(preds, axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.digitize(conf, edges[1:-1], right=False), 0, n_bins - 1)
    n = len(labels)
    total = 0.0
    rows = []
    for b in range(n_bins):
        m = idx == b
        count = int(m.sum())
        if count:
            acc = float(correct[m].mean())
            c = float(conf[m].mean())
            total += count / n * abs(acc - c)
        else:
            acc = c = float("nan")
        rows.append({"bin": b, "lo": float(edges[b]), "hi": float(edges[b + 1]),
                     "count": count, "confidence": c, "accuracy": acc})
    return float(total), rows


def brier(preds: np.ndarray, labels: np.ndarray) -> float:
    """Mean squared distance between the probability vector and the one-hot
    label; ranges over [0, 2]."""
    preds = _check_probs(preds)
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros_like(preds)
    onehot[np.arange(len(labels)), labels] = 1.0
    return float(((preds - onehot) ** 2).sum(axis=1).mean())


def auroc(scores_in: np.ndarray, scores_out: np.ndarray) -> float:
    """P(score_out > score_in) + 0.5 P(tie): the Mann-Whitney statistic
    with the out-of-distribution set as the positive class."""
    a = np.sort(np.asarray(scores_in, dtype=np.float64).ravel())
    b = np.asarray(scores_out, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both score sets must be nonempty")
    greater = np.searchsorted(a, b, side="left")
    greater_or_equal = np.searchsorted(a, b, side="right")
    wins = greater.sum() + 0.5 * (greater_or_equal - greater).sum()
    return float(wins / (a.size * b.size))


def kendall_tau(measure: np.ndarray, gap: np.ndarray) -> float:
    """Kendall tau-a: (concordant - discordant) / C(n, 2); ties add 0."""
    x = np.asarray(measure, dtype=np.float64).ravel()
    y = np.asarray(gap, dtype=np.float64).ravel()
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need two equal-length vectors with n >= 2")
    sx = np.sign(x[:, None] - x[None, :])
    sy = np.sign(y[:, None] - y[None, :])
    n = x.size
    score = np.triu(sx * sy, k=1).sum()
    return float(score / (n * (n - 1) / 2))


def granulated_kendall(records: Sequence[Mapping], axes: Sequence[str]) -> CorrelationReport:
    """Per-axis Kendall correlation averaged over groups fixing the other axes.

    Each record is a mapping with keys "hyperparams" (a dict covering
    every axis), "measure" and "gap". For one axis, records are grouped
    by the values of all remaining axes; tau is computed inside each
    group (0 when measure or gap is constant there) and averaged. Axes
    taking a single value overall are skipped and reported. psi is the
    mean of the per-axis values.
    """
    if not records:
        raise ValueError("no records")
    per_axis: dict[str, float] = {}
    counts: dict[str, int] = {}
    skipped: list[str] = []
    for axis in axes:
        values = {r["hyperparams"][axis] for r in records}
        if len(values) < 2:
            skipped.append(axis)
            continue
        groups: dict[tuple, list[Mapping]] = {}
        for r in records:
            key = tuple((k, r["hyperparams"][k]) for k in axes if k != axis)
            groups.setdefault(key, []).append(r)
        taus = []
        for members in groups.values():
            if len(members) < 2:
                continue
            m = np.array([r["measure"] for r in members])
            g = np.array([r["gap"] for r in members])
            if np.all(m == m[0]) or np.all(g == g[0]):
                taus.append(0.0)
            else:
                taus.append(kendall_tau(m, g))
        if not taus:
            skipped.append(axis)
            continue
        per_axis[axis] = float(np.mean(taus))
        counts[axis] = len(taus)
    measure = np.array([r["measure"] for r in records])
    gap = np.array([r["gap"] for r in records])
    overall = kendall_tau(measure, gap) if len(records) >= 2 else 0.0
    psi = float(np.mean(list(per_axis.values()))) if per_axis else 0.0
    return CorrelationReport(overall_tau=float(overall), per_axis_tau=per_axis,
                             psi=psi, group_counts=counts, skipped_axes=skipped)


def calibration_report(preds: np.ndarray, labels: np.ndarray,
                       n_bins: int = 15,
                       variance_in: np.ndarray | None = None,
                       variance_out: np.ndarray | None = None) -> CalibrationReport:
    """Bundle NLL / ECE / Brier (and AUROC when OOD scores are given)."""
    auc = None
    if variance_out is not None:
        if variance_in is None:
            raise ValueError("need in-distribution scores for AUROC")
        auc = auroc(variance_in, variance_out)
    return CalibrationReport(nll=nll(preds, labels),
                             ece=ece(preds, labels, n_bins),
                             brier=brier(preds, labels), n_bins=n_bins,
                             auroc_ood=auc)
