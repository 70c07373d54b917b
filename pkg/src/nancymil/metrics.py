"""Evaluation metrics: confusion matrices, macro P/R/S, weighted kappa,
Spearman rank correlation with a t-approximation p-value."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DataError, NumericalError


@dataclass
class ConfusionMatrix:
    counts: np.ndarray               # (K, K) int, rows = true, cols = predicted
    labels: tuple[str, ...]

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        K = len(self.labels)
        if self.counts.shape != (K, K):
            raise DataError(f"confusion matrix shape {self.counts.shape} vs "
                            f"{K} labels")
        if np.any(self.counts < 0):
            raise DataError("negative confusion counts")

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def normalized(self) -> np.ndarray:
        """Row-normalized view; empty rows stay all-zero."""
        out = self.counts.astype(np.float64)
        sums = out.sum(axis=1, keepdims=True)
        np.divide(out, sums, out=out, where=sums > 0)
        return out


def confusion(true, pred, labels=None) -> ConfusionMatrix:
    true = list(true)
    pred = list(pred)
    if len(true) != len(pred) or not true:
        raise DataError(f"length mismatch: {len(true)} true vs {len(pred)} "
                        "predicted (both must be nonempty and equal)")
    if labels is None:
        labels = tuple(str(g) for g in range(5))
    K = len(labels)
    index = {lab: i for i, lab in enumerate(labels)}
    counts = np.zeros((K, K), dtype=np.int64)
    for t, p in zip(true, pred):
        counts[index[str(t)], index[str(p)]] += 1
    return ConfusionMatrix(counts=counts, labels=tuple(labels))


@dataclass
class ClassRates:
    precision: float
    recall: float
    specificity: float
    degenerate: bool = False  # a zero denominator was hit; rates forced to 0


@dataclass
class PrsReport:
    per_class: dict[str, ClassRates] = field(default_factory=dict)
    macro_precision: float = 0.0
    macro_recall: float = 0.0
    macro_specificity: float = 0.0


def _safe_rate(num: int, den: int) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def macro_prs(cm: ConfusionMatrix, include=None) -> PrsReport:
    """Per-class and macro precision/recall/specificity.

    Classes outside `include` do not enter the macro mean but still
    contribute to TN/FP tallies (they stay in the matrix).
    """
    if include is None:
        include = cm.labels
    include = [str(c) for c in include]
    if not include:
        raise DataError("include set must be nonempty")
    n = cm.n
    report = PrsReport()
    for c in include:
        i = cm.labels.index(c)
        tp = int(cm.counts[i, i])
        fp = int(cm.counts[:, i].sum()) - tp
        fn = int(cm.counts[i, :].sum()) - tp
        tn = n - tp - fp - fn
        p, dp = _safe_rate(tp, tp + fp)
        r, dr = _safe_rate(tp, tp + fn)
        s, ds = _safe_rate(tn, tn + fp)
        report.per_class[c] = ClassRates(p, r, s, degenerate=dp or dr or ds)
    report.macro_precision = float(np.mean(
        [v.precision for v in report.per_class.values()]))
    report.macro_recall = float(np.mean(
        [v.recall for v in report.per_class.values()]))
    report.macro_specificity = float(np.mean(
        [v.specificity for v in report.per_class.values()]))
    return report


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.n == 0:
        raise DataError("empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.n


def weighted_kappa(cm: ConfusionMatrix, scheme: str = "quadratic") -> float:
    """Weighted Cohen's kappa with quadratic or linear disagreement weights.

    kappa = 1 - sum(w * O) / sum(w * E) with O the observed proportion
    matrix and E the outer product of its marginals.
    """
    K = len(cm.labels)
    n = cm.n
    if n < 1:
        raise DataError("weighted_kappa needs at least one observation")
    i, j = np.meshgrid(np.arange(K), np.arange(K), indexing="ij")
    if scheme == "quadratic":
        w = ((i - j) / (K - 1)) ** 2
    elif scheme == "linear":
        w = np.abs(i - j) / (K - 1)
    else:
        raise DataError(f"unknown kappa weight scheme {scheme!r}")
    O = cm.counts / n
    E = np.outer(O.sum(axis=1), O.sum(axis=0))
    denom = float(np.sum(w * E))
    if denom == 0.0:
        raise NumericalError(
            "weighted kappa undefined: zero expected disagreement "
            "(both raters constant)")
    return 1.0 - float(np.sum(w * O)) / denom


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """Ranks 1..n with ties assigned the average rank of the tied block."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(true, pred) -> tuple[float, float]:
    """Spearman rho (average ranks for ties) and a two-sided p-value from
    the t = rho*sqrt((n-2)/(1-rho^2)) approximation."""
    x = np.asarray(true, dtype=np.float64)
    y = np.asarray(pred, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 3:
        raise DataError("spearman needs two equal-length vectors, n >= 3")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    sx = rx - rx.mean()
    sy = ry - ry.mean()
    vx = float(sx @ sx)
    vy = float(sy @ sy)
    if vx == 0.0 or vy == 0.0:
        raise NumericalError("spearman undefined: zero rank variance")
    rho = float(sx @ sy) / np.sqrt(vx * vy)
    n = len(x)
    if abs(rho) >= 1.0:
        return float(np.sign(rho)), 0.0
    t = rho * np.sqrt((n - 2) / (1.0 - rho ** 2))
    p = 2.0 * stats.t.sf(abs(t), df=n - 2)
    return rho, float(p)


@dataclass
class MetricReport:
    n: int
    accuracy: float
    prs: PrsReport
    kappa: float | None
    kappa_scheme: str
    rho: float | None
    rho_p: float | None
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "accuracy": self.accuracy,
            "macro_precision": self.prs.macro_precision,
            "macro_recall": self.prs.macro_recall,
            "macro_specificity": self.prs.macro_specificity,
            "per_class": {
                c: {"precision": v.precision, "recall": v.recall,
                    "specificity": v.specificity, "degenerate": v.degenerate}
                for c, v in self.prs.per_class.items()},
            "weighted_kappa": self.kappa,
            "kappa_scheme": self.kappa_scheme,
            "spearman_rho": self.rho,
            "spearman_p": self.rho_p,
            "errors": self.errors,
        }


def evaluate_grades(true, pred, kappa_scheme: str = "quadratic",
                    include=None) -> MetricReport:
    """Full five-grade report. Undefined kappa/rho become recorded errors
    rather than numbers."""
    cm = confusion(true, pred)
    errors: list[str] = []
    try:
        kappa = weighted_kappa(cm, kappa_scheme)
    except NumericalError as exc:
        kappa = None
        errors.append(f"kappa: {exc}")
    try:
        rho, p = spearman([int(t) for t in true], [int(p) for p in pred])
    except NumericalError as exc:
        rho, p = None, None
        errors.append(f"spearman: {exc}")
    return MetricReport(n=cm.n, accuracy=accuracy(cm),
                        prs=macro_prs(cm, include=include),
                        kappa=kappa, kappa_scheme=kappa_scheme,
                        rho=rho, rho_p=p, errors=errors)
