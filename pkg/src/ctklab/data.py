"""Dataset ingestion and synthetic generators."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ctklab.nets import Batch


@dataclass(frozen=True)
class CsvSchema:
    """Column names for features and targets; order is preserved."""

    features: tuple[str, ...]
    targets: tuple[str, ...]

    @staticmethod
    def from_dict(d: dict) -> "CsvSchema":
        return CsvSchema(features=tuple(d["features"]), targets=tuple(d["targets"]))


def load_csv(path: str | Path, schema: CsvSchema) -> Batch:
    """Read a header-first comma-separated UTF-8 file into a raw Batch.

    Raises ValueError naming the missing column or the (row, column) of
    any non-numeric cell. Standardization is a separate step so it can
    use training-split statistics only.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        pos = {name: i for i, name in enumerate(header)}
        for col in (*schema.features, *schema.targets):
            if col not in pos:
                raise ValueError(f"{path}: missing column {col!r}")
        feats, targs = [], []
        for rownum, row in enumerate(reader, start=2):
            def cell(col: str) -> float:
                raw = row[pos[col]]
                try:
                    return float(raw)
                except ValueError:
                    raise ValueError(
                        f"{path}: non-numeric value {raw!r} at row {rownum}, "
                        f"column {col!r}") from None
            feats.append([cell(c) for c in schema.features])
            targs.append([cell(c) for c in schema.targets])
    if not feats:
        raise ValueError(f"{path}: no data rows")
    return Batch(np.asarray(feats), np.asarray(targs))


@dataclass(frozen=True)
class StandardizationParams:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}


def standardize(train: Batch, *others: Batch) -> tuple[list[Batch], StandardizationParams]:
    """Zero-mean / unit-variance feature columns using train statistics only.

    Constant columns keep std 1 so they pass through unscaled. Returns
    the standardized batches (train first) and the parameters for the
    report.
    """
    mean = train.inputs.mean(axis=0)
    std = train.inputs.std(axis=0, ddof=0)
    std = np.where(std > 0, std, 1.0)
    out = [Batch((b.inputs - mean) / std, b.targets, b.split_tag)
           for b in (train, *others)]
    return out, StandardizationParams(mean=tuple(mean), std=tuple(std))


def make_split(batch: Batch, ratio: float, seed: int) -> tuple[Batch, Batch]:
    """Deterministic shuffle-split into (S_P, S_Q); disjoint and exhaustive."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie in (0, 1)")
    n = batch.n
    n_p = int(round(ratio * n))
    if n_p == 0 or n_p == n:
        raise ValueError("split would leave one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    idx_p, idx_q = perm[:n_p], perm[n_p:]
    sp = Batch(batch.inputs[idx_p], batch.targets[idx_p], "S_P")
    sq = Batch(batch.inputs[idx_q], batch.targets[idx_q], "S_Q")
    return sp, sq


def synthetic_gap_1d(n: int, gap: tuple[float, float] = (-1.0, 1.0),
                     noise: float = 0.1, seed: int = 0,
                     n_test: int = 200) -> tuple[Batch, Batch]:
    """1-D regression y = sin(2x) with no training inputs inside the gap.

    Training x is uniform over [-3, 3] minus the gap interval; the test
    batch is an even grid over the full range (gap included) with
    noise-free targets, for probing in-between uncertainty.
    """
    lo, hi = -3.0, 3.0
    glo, ghi = gap
    if not lo < glo < ghi < hi:
        raise ValueError("gap interval must sit strictly inside [-3, 3]")
    rng = np.random.default_rng(seed)
    left = glo - lo
    right = hi - ghi
    u = rng.uniform(0.0, left + right, size=n)
    x = np.where(u < left, lo + u, ghi + (u - left))
    y = np.sin(2.0 * x) + noise * rng.standard_normal(n)
    train = Batch(x[:, None], y[:, None], "S_P")
    xt = np.linspace(lo, hi, n_test)
    test = Batch(xt[:, None], np.sin(2.0 * xt)[:, None], "test")
    return train, test


def two_blobs(n: int, n_classes: int = 2, separation: float = 4.0,
              seed: int = 0, dim: int = 2) -> Batch:
    """Two Gaussian clusters with one-hot targets, shuffled.

    The clusters sit at +/- separation/2 along the first axis; targets
    are one-hot over ``n_classes`` (the remaining classes stay empty,
    which keeps K configurable for multi-output tests).
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    n0 = n // 2
    n1 = n - n0
    X = rng.standard_normal((n, dim))
    X[:n0, 0] -= separation / 2.0
    X[n0:, 0] += separation / 2.0
    labels = np.concatenate([np.zeros(n0, dtype=np.int64),
                             np.ones(n1, dtype=np.int64)])
    perm = rng.permutation(n)
    X, labels = X[perm], labels[perm]
    Y = np.zeros((n, n_classes))
    Y[np.arange(n), labels] = 1.0
    return Batch(X, Y, "S_P")
