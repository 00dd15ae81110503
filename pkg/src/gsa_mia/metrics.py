"""ROC analysis and attack metrics (ASR, AUC, TPR at fixed FPR)."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist(), self.thresholds.tolist()))


@dataclass
class EvalReport:
    asr: float
    auc: float
    tpr_at_1pct_fpr: float
    tpr_at_01pct_fpr: float
    n_members: int
    n_nonmembers: int
    config_digest: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError("scores and labels must be 1-d arrays of equal length")
    if not np.all(np.isin(labels, (0, 1))):
        raise MetricError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == len(labels):
        raise MetricError("both classes must be present")
    return scores, labels


def roc_curve(scores, labels) -> RocCurve:
    """Sweep thresholds over distinct scores, high to low; tied scores move together.

    Each point ``(fpr, tpr, thr)`` classifies ``score >= thr`` as member.
    The first point has threshold +inf.
    """
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last_of_group = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(1 - y)[last_of_group]
    n_pos, n_neg = y.sum(), len(y) - y.sum()
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thr = np.r_[np.inf, s[last_of_group]]
    return RocCurve(fpr, tpr, thr)


def auc(curve: RocCurve) -> float:
    return float(np.trapezoid(curve.tpr, curve.fpr))


def auc_score(scores, labels) -> float:
    return auc(roc_curve(scores, labels))


def asr(scores, labels, threshold: float = 0.5) -> float:
    """Accuracy of ``score >= threshold`` on a balanced member/non-member set."""
    scores, labels = _check_binary(scores, labels)
    if 2 * int(labels.sum()) != len(labels):
        raise MetricError("ASR needs equal numbers of members and non-members")
    pred = (scores >= threshold).astype(np.int64)
    return float(np.mean(pred == labels))


def tpr_at_fpr(curve: RocCurve, target_fpr: float) -> float:
    """Best TPR among achievable operating points with FPR <= target (no interpolation)."""
    if not 0 < target_fpr < 1:
        raise MetricError("target FPR must lie in (0, 1)")
    ok = curve.fpr <= target_fpr
    return float(curve.tpr[ok].max()) if ok.any() else 0.0


def evaluate(scores, labels, threshold: float = 0.5, digest: str = "") -> tuple[EvalReport, RocCurve]:
    curve = roc_curve(scores, labels)
    labels = np.asarray(labels)
    report = EvalReport(
        asr=asr(scores, labels, threshold),
        auc=auc(curve),
        tpr_at_1pct_fpr=tpr_at_fpr(curve, 0.01),
        tpr_at_01pct_fpr=tpr_at_fpr(curve, 0.001),
        n_members=int(labels.sum()),
        n_nonmembers=int(len(labels) - labels.sum()),
        config_digest=digest,
    )
    return report, curve


def write_roc_csv(path, curve: RocCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fpr", "tpr", "threshold"])
        for f, t, th in curve.points:
            w.writerow([repr(f), repr(t), repr(th)])


def read_roc_csv(path) -> RocCurve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["fpr", "tpr", "threshold"]:
        raise MetricError(f"{path}: not a ROC CSV")
    arr = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, 3)
    return RocCurve(arr[:, 0], arr[:, 1], arr[:, 2])
