"""AUC, time-weighted AUC, r-squared and McNemar's test over prediction traces."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

IID_CAVEAT = ("McNemar's test assumes independent observations; attempts within a student "
              "sequence are not i.i.d. (they behave like time series), so read p-values as indicative.")


class UndefinedMetricError(ValueError):
    pass


class TraceAlignmentError(ValueError):
    pass


@dataclass
class PredictionTrace:
    """Per-attempt predictions in evaluation order."""
    students: list[str] = field(default_factory=list)
    skills: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    probs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.students = [str(s) for s in self.students]
        self.skills = np.asarray(self.skills, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.probs)
        w = self.weights
        self.weights = np.ones(n) if w is None or (len(w) == 0 and n) else np.asarray(w, dtype=np.float64)
        if not (len(self.students) == len(self.skills) == len(self.labels) == len(self.weights) == n):
            raise ValueError("trace columns have different lengths")
        if n and ((self.probs < 0).any() or (self.probs > 1).any()):
            raise ValueError("probabilities must lie in [0, 1]")
        if n and not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        if n and (self.weights <= 0).any():
            raise ValueError("weights must be positive")

    @classmethod
    def from_arrays(cls, probs, labels, weights=None, students=None, skills=None) -> "PredictionTrace":
        n = len(probs)
        return cls(list(students) if students is not None else ["0"] * n,
                   np.zeros(n, dtype=np.int64) if skills is None else skills,
                   probs, labels, np.ones(n) if weights is None else weights)

    def __len__(self):
        return len(self.probs)

    @staticmethod
    def concat(traces: Sequence["PredictionTrace"]) -> "PredictionTrace":
        traces = list(traces)
        if not traces:
            return PredictionTrace()
        return PredictionTrace(
            [s for t in traces for s in t.students],
            np.concatenate([t.skills for t in traces]),
            np.concatenate([t.probs for t in traces]),
            np.concatenate([t.labels for t in traces]),
            np.concatenate([t.weights for t in traces]),
        )

    def write(self, out: TextIO, delimiter: str = "\t") -> None:
        out.write(delimiter.join(("student", "skill", "prob", "label", "weight")) + "\n")
        for s, k, p, y, w in zip(self.students, self.skills, self.probs, self.labels, self.weights):
            out.write(delimiter.join((s, str(int(k)), repr(float(p)), str(int(y)), repr(float(w)))) + "\n")

    @classmethod
    def read(cls, source: TextIO, delimiter: str = "\t") -> "PredictionTrace":
        lines = [ln.rstrip("\n") for ln in source if ln.strip()]
        if not lines:
            return cls()
        rows = [ln.split(delimiter) for ln in lines[1:]]
        return cls([r[0] for r in rows], [int(r[1]) for r in rows], [float(r[2]) for r in rows],
                   [int(r[3]) for r in rows], [float(r[4]) for r in rows])


def _check_two_classes(labels: np.ndarray):
    if labels.size == 0 or labels.min() == labels.max():
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")


def weighted_roc(scores, labels, weights=None) -> tuple[np.ndarray, np.ndarray]:
    """Weighted ROC points (fpr, tpr) over every distinct threshold, from (0, 0) to (1, 1)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    w = np.ones_like(s) if weights is None else np.asarray(weights, dtype=np.float64)
    _check_two_classes(y)
    order = np.argsort(-s, kind="mergesort")
    s, y, w = s[order], y[order], w[order]
    tp = np.cumsum(w * (y == 1))
    fp = np.cumsum(w * (y == 0))
    # keep only the last index of each block of tied scores
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tpr = np.r_[0.0, tp[last] / tp[-1]]
    fpr = np.r_[0.0, fp[last] / fp[-1]]
    return fpr, tpr


def weighted_auc(trace_or_scores, labels=None, weights=None) -> float:
    """Area under the weighted ROC by the trapezoid rule (tied scores get half credit)."""
    if isinstance(trace_or_scores, PredictionTrace):
        t = trace_or_scores
        scores, labels, weights = t.probs, t.labels, t.weights
    else:
        scores = trace_or_scores
    fpr, tpr = weighted_roc(scores, labels, weights)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def auc(trace_or_scores, labels=None) -> float:
    if isinstance(trace_or_scores, PredictionTrace):
        return weighted_auc(trace_or_scores.probs, trace_or_scores.labels, None)
    return weighted_auc(trace_or_scores, labels, None)


def r2(trace_or_probs, labels=None) -> float:
    """Coefficient of determination of probabilities against binary labels."""
    if isinstance(trace_or_probs, PredictionTrace):
        p, y = trace_or_probs.probs, trace_or_probs.labels
    else:
        p, y = np.asarray(trace_or_probs, dtype=np.float64), np.asarray(labels, dtype=np.float64)
    if len(y) == 0:
        raise UndefinedMetricError("r2 of an empty trace")
    y = y.astype(np.float64)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise UndefinedMetricError("r2 undefined: all labels identical")
    return 1.0 - float(((y - p) ** 2).sum()) / ss_tot


@dataclass(frozen=True)
class ContingencyTable:
    a: int
    b: int
    c: int
    d: int

    @property
    def n(self) -> int:
        return self.a + self.b + self.c + self.d


@dataclass(frozen=True)
class McNemarResult:
    table: ContingencyTable
    chi2: float | None
    p_value: float | None
    corrected: bool = False

    @property
    def discordant(self) -> bool:
        return self.table.b + self.table.c > 0

    def describe(self) -> str:
        t = self.table
        lines = [
            "               M2 correct  M2 wrong",
            f"  M1 correct   {t.a:>10}  {t.b:>8}",
            f"  M1 wrong     {t.c:>10}  {t.d:>8}",
            f"  n = {t.n}",
        ]
        if self.chi2 is None:
            lines.append("  no discordance (b + c = 0): statistic undefined")
        else:
            tag = " (continuity corrected)" if self.corrected else ""
            lines.append(f"  chi2 = {self.chi2:.6g}{tag}, p = {self.p_value:.6g}")
        lines.append(f"  note: {IID_CAVEAT}")
        return "\n".join(lines)


def chi2_sf_1dof(x: float) -> float:
    """Upper tail of chi-squared with one degree of freedom: erfc(sqrt(x / 2))."""
    return math.erfc(math.sqrt(max(x, 0.0) / 2.0))


def mcnemar_from_counts(b: int, c: int, a: int = 0, d: int = 0, corrected: bool = False) -> McNemarResult:
    table = ContingencyTable(a, b, c, d)
    if b + c == 0:
        return McNemarResult(table, None, None, corrected)
    num = max(abs(b - c) - 1, 0) ** 2 if corrected else (b - c) ** 2
    chi2 = num / (b + c)
    return McNemarResult(table, chi2, chi2_sf_1dof(chi2), corrected)


def align_check(t1: PredictionTrace, t2: PredictionTrace) -> None:
    if len(t1) != len(t2):
        raise TraceAlignmentError(f"traces have different lengths ({len(t1)} vs {len(t2)})")
    for i in range(len(t1)):
        k1 = (t1.students[i], int(t1.skills[i]), int(t1.labels[i]))
        k2 = (t2.students[i], int(t2.skills[i]), int(t2.labels[i]))
        if k1 != k2:
            raise TraceAlignmentError(f"traces diverge at entry {i}: {k1} vs {k2}")


def mcnemar(trace_m1: PredictionTrace, trace_m2: PredictionTrace, threshold: float = 0.5,
            corrected: bool = False) -> McNemarResult:
    """Paired test on two models' thresholded predictions of the same attempts."""
    align_check(trace_m1, trace_m2)
    y = trace_m1.labels
    ok1 = (trace_m1.probs >= threshold).astype(np.int64) == y
    ok2 = (trace_m2.probs >= threshold).astype(np.int64) == y
    a = int(np.sum(ok1 & ok2))
    b = int(np.sum(ok1 & ~ok2))
    c = int(np.sum(~ok1 & ok2))
    d = int(np.sum(~ok1 & ~ok2))
    return mcnemar_from_counts(b, c, a, d, corrected)


@dataclass
class MetricReport:
    fold: int | str
    r2: float
    auc: float
    wauc: float
    n: int
    positives: int

    def as_dict(self) -> dict:
        return {"fold": self.fold, "r2": self.r2, "auc": self.auc, "wauc": self.wauc,
                "n": self.n, "positives": self.positives}


def evaluate_trace(trace: PredictionTrace, fold: int | str = "all") -> MetricReport:
    return MetricReport(fold, r2(trace), auc(trace), weighted_auc(trace), len(trace), int(trace.labels.sum()))


def report(traces: dict[int, PredictionTrace], k: int | None = None,
           baseline: dict[int, PredictionTrace] | None = None, threshold: float = 0.5) -> dict:
    """Per-fold metrics, their means, and (with ``baseline``) McNemar on concatenated traces."""
    expected = set(range(k)) if k is not None else set(traces)
    missing = sorted(expected - set(traces))
    folds = [evaluate_trace(traces[f], f) for f in sorted(traces)]
    out = {
        "folds": [m.as_dict() for m in folds],
        "mean": {key: float(np.mean([getattr(m, key) for m in folds])) if folds else None
                 for key in ("r2", "auc", "wauc")},
        "missing_folds": missing,
    }
    if baseline is not None:
        common = sorted(set(traces) & set(baseline))
        res = mcnemar(PredictionTrace.concat([baseline[f] for f in common]),
                      PredictionTrace.concat([traces[f] for f in common]), threshold)
        out["mcnemar"] = {"a": res.table.a, "b": res.table.b, "c": res.table.c, "d": res.table.d,
                          "chi2": res.chi2, "p": res.p_value, "caveat": IID_CAVEAT}
    return out
