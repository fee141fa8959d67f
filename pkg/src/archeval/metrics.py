"""Kendall tau (tie-corrected) and Pearson correlation for predicted-vs-true checks."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class PairCounts:
    concordant: int
    discordant: int
    ties_x: int  # tied in x only
    ties_y: int  # tied in y only
    ties_xy: int  # tied in both

    @property
    def n_pairs(self) -> int:
        return self.concordant + self.discordant + self.ties_x + self.ties_y + self.ties_xy


def _check_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least two observations")
    if np.isnan(x).any() or np.isnan(y).any():
        raise ValueError("NaN in input")
    return x, y


def _tie_pairs(sorted_values: np.ndarray) -> int:
    _, counts = np.unique(sorted_values, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def _count_inversions(seq: np.ndarray) -> int:
    """Strict inversions (i < j, seq[i] > seq[j]) via a Fenwick tree over ranks."""
    ranks = np.unique(seq, return_inverse=True)[1] + 1
    size = int(ranks.max())
    tree = [0] * (size + 1)
    inversions = 0
    seen = 0
    for r in ranks.tolist():
        # count earlier elements <= r
        i, le = r, 0
        while i > 0:
            le += tree[i]
            i -= i & -i
        inversions += seen - le
        i = r
        while i <= size:
            tree[i] += 1
            i += i & -i
        seen += 1
    return inversions


def pair_counts(x, y) -> PairCounts:
    """Classify all n(n-1)/2 pairs in O(n log n)."""
    x, y = _check_pair(x, y)
    n = x.size
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    n0 = n * (n - 1) // 2
    n1 = _tie_pairs(xs)
    joint = np.unique(np.stack([xs, ys], axis=1), axis=0, return_counts=True)[1]
    n3 = int((joint * (joint - 1) // 2).sum())
    n2 = _tie_pairs(np.sort(ys))
    discordant = _count_inversions(ys)
    concordant = n0 - n1 - n2 + n3 - discordant
    return PairCounts(concordant, discordant, n1 - n3, n2 - n3, n3)


def pair_counts_bruteforce(x, y) -> PairCounts:
    """O(n^2) enumeration of every pair; test oracle for :func:`pair_counts`."""
    x, y = _check_pair(x, y)
    c = d = tx = ty = txy = 0
    xl, yl = x.tolist(), y.tolist()
    n = len(xl)
    for i in range(n - 1):
        for j in range(i + 1, n):
            dx = xl[i] - xl[j]
            dy = yl[i] - yl[j]
            if dx == 0 and dy == 0:
                txy += 1
            elif dx == 0:
                tx += 1
            elif dy == 0:
                ty += 1
            elif (dx > 0) == (dy > 0):
                c += 1
            else:
                d += 1
    return PairCounts(c, d, tx, ty, txy)


def tau_from_counts(counts: PairCounts, variant: str = "b") -> float:
    c, d = counts.concordant, counts.discordant
    if variant == "a":
        n0 = counts.n_pairs
        return (c - d) / n0
    if variant != "b":
        raise ValueError(f"variant must be 'a' or 'b', got {variant!r}")
    denom = (c + d + counts.ties_x) * (c + d + counts.ties_y)
    if denom == 0:
        return math.nan
    return (c - d) / math.sqrt(denom)


def kendall_tau(x, y, variant: str = "b") -> float:
    """Kendall's tau-b (default) or tau-a. NaN when either input is constant."""
    return tau_from_counts(pair_counts(x, y), variant)


def kendall_tau_bruteforce(x, y, variant: str = "b") -> float:
    return tau_from_counts(pair_counts_bruteforce(x, y), variant)


def pearson(x, y) -> float:
    """Sample correlation coefficient; NaN when either input has zero variance."""
    x, y = _check_pair(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return math.nan
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


@dataclass(frozen=True)
class CorrelationReport:
    kendall_tau: float
    pearson_r: float
    n: int
    ties_pred: int
    ties_true: int

    @property
    def defined(self) -> bool:
        return not (math.isnan(self.kendall_tau) or math.isnan(self.pearson_r))

    def to_dict(self) -> dict:
        return {"kendall_tau": self.kendall_tau, "pearson_r": self.pearson_r, "n": self.n,
                "ties_pred": self.ties_pred, "ties_true": self.ties_true, "defined": self.defined}


def correlation_report(pred, true) -> tuple[CorrelationReport, list[tuple[float, float]]]:
    """Both statistics plus the raw (pred, true) rows for plotting."""
    p, t = _check_pair(pred, true)
    counts = pair_counts(p, t)
    report = CorrelationReport(
        kendall_tau=tau_from_counts(counts),
        pearson_r=pearson(p, t),
        n=int(p.size),
        ties_pred=counts.ties_x + counts.ties_xy,
        ties_true=counts.ties_y + counts.ties_xy,
    )
    return report, list(zip(p.tolist(), t.tolist()))


def write_scatter_csv(path, report: CorrelationReport, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# kendall_tau={report.kendall_tau:.6f} pearson_r={report.pearson_r:.6f} n={report.n}\n")
        w = csv.writer(fh)
        w.writerow(["pred", "true"])
        w.writerows(rows)


def read_scatter_csv(path) -> tuple[dict, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().lstrip("#").split()
        meta = {k: float(v) for k, v in (item.split("=") for item in first)}
        rows = list(csv.reader(fh))
    return meta, np.array([[float(a), float(b)] for a, b in rows[1:]])
