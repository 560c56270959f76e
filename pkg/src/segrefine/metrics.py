"""Overlap metrics, the Wilcoxon signed-rank test, and the Table-style report.

Conventions:

* ``pred`` is the label under evaluation (A), ``gt`` the reference (B).
* A class absent from both maps scores DSC = IoU = 1.
* RVD is ``100 * | |A| - |B| | / |B|`` in percent and is undefined (``None``)
  when the reference class is empty.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

METRICS = ("iou", "dsc", "rvd")
VARIANT_ROWS = {
    "initial": "Initial Weak labels",
    "baseline": "Dual branches without transfer learning",
    "transfer": "Dual Branches with transfer learning",
}
DEFAULT_CLASS_NAMES = {1: "Muscle", 2: "Subcutaneous adipose tissue", 3: "Visceral adipose tissue"}
COMPARISONS = (("transfer", "initial"), ("transfer", "baseline"))
EXACT_MAX_N = 12


@dataclass
class ClassCounts:
    """Per-class pixel counts. Index ``l`` of each array refers to class ``l``."""

    intersection: np.ndarray
    pred: np.ndarray
    gt: np.ndarray

    @property
    def union(self) -> np.ndarray:
        return self.pred + self.gt - self.intersection

    @property
    def num_classes(self) -> int:
        return len(self.intersection)


def confusion_counts(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> ClassCounts:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} contains class indices outside [0, {num_classes})")
    cm = np.bincount(
        gt.ravel().astype(np.int64) * num_classes + pred.ravel().astype(np.int64), minlength=num_classes**2
    ).reshape(num_classes, num_classes)
    return ClassCounts(np.diag(cm).copy(), cm.sum(axis=0), cm.sum(axis=1))


def dsc(counts: ClassCounts, cls: int) -> float:
    denom = counts.pred[cls] + counts.gt[cls]
    if denom == 0:
        return 1.0
    return 2.0 * counts.intersection[cls] / denom


def iou(counts: ClassCounts, cls: int) -> float:
    u = counts.union[cls]
    if u == 0:
        return 1.0
    return counts.intersection[cls] / u


def rvd(counts: ClassCounts, cls: int) -> float | None:
    b = counts.gt[cls]
    if b == 0:
        return None
    return 100.0 * abs(int(counts.pred[cls]) - int(b)) / b


def class_metrics(pred, gt, num_classes: int, classes=None) -> dict[int, dict[str, float | None]]:
    counts = confusion_counts(pred, gt, num_classes)
    classes = range(1, num_classes) if classes is None else classes
    return {
        int(c): {"iou": float(iou(counts, c)), "dsc": float(dsc(counts, c)), "rvd": _opt_float(rvd(counts, c))}
        for c in classes
    }


def _opt_float(v):
    return None if v is None else float(v)


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank


@dataclass
class WilcoxonResult:
    statistic: float
    p: float
    n: int
    method: str


def _average_ranks(x: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """1-based ranks with ties sharing their mean rank; also returns tie sizes."""
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    ties = []
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0
        if j > i:
            ties.append(j - i + 1)
        i = j + 1
    return ranks, ties


def _exact_lower_tail(ranks: np.ndarray, w: float) -> float:
    """P(W+ <= w) under the null, by counting sign assignments.

    Ranks are half-integers at worst, so doubled ranks are integers and the
    distribution of 2*W+ is built by a subset-sum count.
    """
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    limit = int(math.floor(2 * w + 1e-9))
    return int(counts[: limit + 1].sum()) / 2 ** len(ranks)


def wilcoxon_signed_rank(a, b, method: str = "auto") -> WilcoxonResult:
    """Paired two-sided Wilcoxon signed-rank test of ``a`` against ``b``.

    Zero differences are dropped. ``method`` is ``"exact"`` (enumerates the
    null distribution), ``"normal"`` (tie-corrected variance with continuity
    correction) or ``"auto"`` (exact when at most 12 differences remain).
    The returned statistic is ``min(W+, W-)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be 1-d and equal length, got {a.shape} and {b.shape}")
    d = a - b
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 1.0, 0, "no-difference")
    if n < 6:
        raise ValueError(f"need at least 6 non-zero paired differences, got {n}")
    ranks, ties = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    if method == "exact":
        p = min(1.0, 2.0 * _exact_lower_tail(ranks, w))
    elif method == "normal":
        mu = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - sum(t**3 - t for t in ties) / 48.0
        z = max(abs(w - mu) - 0.5, 0.0) / math.sqrt(var)
        p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    else:
        raise ValueError(f"unknown method {method!r}")
    return WilcoxonResult(w, p, n, method)


# ---------------------------------------------------------------------------
# report


@dataclass
class RefinementReport:
    variants: list[str]
    classes: dict[int, str]
    n_samples: int
    # stats[variant][class][metric] = {"mean": %, "std": %, "n": count}
    stats: dict = field(default_factory=dict)
    # pvalues["transfer_vs_initial"][class] = p on per-sample DSC
    pvalues: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "variants": [{"key": v, "name": VARIANT_ROWS.get(v, v)} for v in self.variants],
            "classes": {str(c): n for c, n in self.classes.items()},
            "n_samples": self.n_samples,
            "std_kind": "population",
            "stats": {v: {str(c): m for c, m in cs.items()} for v, cs in self.stats.items()},
            "pvalues": {k: {str(c): p for c, p in ps.items()} for k, ps in self.pvalues.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def render_table(self) -> str:
        lines = [
            f"Label accuracy against ground truth, mean±std over {self.n_samples} samples "
            "(± is the population standard deviation)",
            "",
        ]
        width = max(len(VARIANT_ROWS.get(v, v)) for v in self.variants) + 2
        width = max(width, len("Methods") + 2)
        for k, (cls, name) in enumerate(sorted(self.classes.items())):
            lines.append(f"{chr(ord('A') + k)}: {name}")
            lines.append("Methods".ljust(width) + "".join(h.ljust(14) for h in ("IoU (%)", "DSC (%)", "RVD (%)")).rstrip())
            for v in self.variants:
                cells = []
                for m in METRICS:
                    s = self.stats[v][cls][m]
                    cells.append("n/a" if s["mean"] is None else f"{s['mean']:.1f}±{s['std']:.1f}")
                lines.append(VARIANT_ROWS.get(v, v).ljust(width) + "".join(c.ljust(14) for c in cells).rstrip())
            for key, ps in self.pvalues.items():
                p = ps.get(cls)
                label = key.replace("_vs_", " vs ")
                lines.append(f"  Wilcoxon p (DSC, {label}): " + ("n/a" if p is None else f"{p:.4g}"))
            lines.append("")
        return "\n".join(lines)


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(vals, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(vals)}


def aggregate_report(per_sample: dict[str, dict[str, dict]], class_names: dict[int, str] | None = None) -> RefinementReport:
    """Fold per-sample metrics into per-variant means and paired p-values.

    ``per_sample[variant][sample_id][class][metric]`` holds fractions for
    IoU/DSC and percentages for RVD; the report expresses all three in
    percent. Every variant must cover the same sample ids.
    """
    if not per_sample:
        raise ValueError("aggregate_report needs at least one variant")
    order = [v for v in VARIANT_ROWS if v in per_sample] + sorted(v for v in per_sample if v not in VARIANT_ROWS)
    ids = sorted(per_sample[order[0]])
    for v in order[1:]:
        if sorted(per_sample[v]) != ids:
            missing = sorted(set(ids) ^ set(per_sample[v]))
            raise ValueError(f"variant {v!r} is not paired with {order[0]!r}; mismatched ids: {missing[:10]}")
    first = per_sample[order[0]][ids[0]]
    classes = sorted(int(c) for c in first)
    names = class_names or DEFAULT_CLASS_NAMES
    report = RefinementReport(order, {c: names.get(c, f"class {c}") for c in classes}, len(ids))

    def col(v, c, m):
        rows = per_sample[v]
        out = []
        for i in ids:
            x = _lookup(rows[i], c)[m]
            out.append(None if x is None else (x * 100.0 if m != "rvd" else x))
        return out

    for v in order:
        report.stats[v] = {c: {m: _mean_std(col(v, c, m)) for m in METRICS} for c in classes}
    for hi, lo in COMPARISONS:
        if hi in per_sample and lo in per_sample:
            key = f"{hi}_vs_{lo}"
            report.pvalues[key] = {}
            for c in classes:
                try:
                    res = wilcoxon_signed_rank(col(hi, c, "dsc"), col(lo, c, "dsc"))
                    report.pvalues[key][c] = res.p
                except ValueError:
                    report.pvalues[key][c] = None
    return report


def _lookup(row: dict, cls: int) -> dict:
    return row[cls] if cls in row else row[str(cls)]
