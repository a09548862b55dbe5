"""ROC analysis, Youden-optimal operating point and per-epoch model selection.

Abnormal is the positive class and higher scores are more anomalous.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidInputError, UndefinedMetricError
from .preprocess import ABNORMAL, NORMAL


@dataclass
class EvalReport:
    auc: float
    positives: int
    negatives: int
    roc_points: list = field(default_factory=list)
    threshold: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None
    youden_j: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["threshold"] = _encode_float(self.threshold)
        d["roc_points"] = [[float(a), float(b)] for a, b in self.roc_points]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["threshold"] = _decode_float(d.get("threshold"))
        d["roc_points"] = [tuple(p) for p in d.get("roc_points", [])]
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls.from_dict(json.loads(text))


def _encode_float(v):
    if v is None or math.isfinite(v):
        return v
    return "inf" if v > 0 else "-inf"


def _decode_float(v):
    return float(v) if isinstance(v, str) else v


REPORT_SCHEMA = {
    "type": "object",
    "required": ["auc", "threshold", "sensitivity", "specificity", "youden_j",
                 "roc_points", "positives", "negatives"],
    "additionalProperties": False,
    "properties": {
        "auc": {"type": "number", "minimum": 0, "maximum": 1},
        "threshold": {"oneOf": [{"type": "number"}, {"enum": ["inf", "-inf"]}]},
        "sensitivity": {"type": "number", "minimum": 0, "maximum": 1},
        "specificity": {"type": "number", "minimum": 0, "maximum": 1},
        "youden_j": {"type": "number", "minimum": -1, "maximum": 1},
        "roc_points": {"type": "array", "items": {
            "type": "array", "minItems": 2, "maxItems": 2,
            "items": {"type": "number", "minimum": 0, "maximum": 1}}},
        "positives": {"type": "integer", "minimum": 1},
        "negatives": {"type": "integer", "minimum": 1},
    },
}


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or len(s) != len(labels):
        raise InvalidInputError("scores and labels must be equal-length sequences")
    if not np.all(np.isfinite(s)):
        raise InvalidInputError("scores must be finite")
    y = np.array([_is_positive(v) for v in labels], dtype=bool)
    pos, neg = int(y.sum()), int((~y).sum())
    if pos == 0 or neg == 0:
        raise UndefinedMetricError(
            f"ROC analysis needs both classes (got {pos} abnormal, {neg} normal)")
    return s, y, pos, neg


def _is_positive(label) -> bool:
    if label == ABNORMAL:
        return True
    if label == NORMAL:
        return False
    if isinstance(label, (bool, np.bool_, int, np.integer)) and label in (0, 1):
        return bool(label)
    raise InvalidInputError(f"unknown label {label!r}")


def _sweep(s, y):
    """Cumulative (tp, fp) after each group of tied scores, highest scores first."""
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    last_of_group = np.r_[s_sorted[1:] != s_sorted[:-1], True]
    return s_sorted[last_of_group], tp[last_of_group], fp[last_of_group]


def roc_auc(scores, labels) -> EvalReport:
    """Rank-statistic AUC (Mann-Whitney U / PN, ties count one half) plus the ROC curve."""
    s, y, pos, neg = _prepare(scores, labels)
    ranks = rankdata(s)
    auc = (ranks[y].sum() - pos * (pos + 1) / 2.0) / (pos * neg)
    _, tp, fp = _sweep(s, y)
    points = [(0.0, 0.0)] + [(f / neg, t / pos) for t, f in zip(tp.tolist(), fp.tolist())]
    return EvalReport(float(auc), pos, neg, points)


def trapezoid_auc(points) -> float:
    fpr, tpr = np.asarray(points, dtype=np.float64).T
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def youden_optimal(scores, labels) -> EvalReport:
    """Threshold maximizing J = sensitivity + specificity - 1, rule ``score >= t``.

    Candidates are midpoints between consecutive distinct scores plus +-inf.
    Equal J is resolved toward higher specificity.
    """
    s, y, pos, neg = _prepare(scores, labels)
    values, tp, fp = _sweep(s, y)
    tp = np.r_[0, tp].tolist()
    fp = np.r_[0, fp].tolist()
    thresholds = [math.inf] + [(a + b) / 2.0 for a, b in zip(values[:-1], values[1:])] + [-math.inf]
    # J * pos * neg as an exact integer; specificity via false positives
    best = max(range(len(tp)), key=lambda i: (tp[i] * neg - fp[i] * pos, -fp[i], -i))
    sens = tp[best] / pos
    spec = (neg - fp[best]) / neg
    report = roc_auc(s, y)
    report.threshold = float(thresholds[best])
    report.sensitivity, report.specificity = sens, spec
    report.youden_j = sens + spec - 1.0
    return report


evaluate = youden_optimal


# ------------------------------------------------------------ model selection

@dataclass
class EpochSelection:
    aucs: list
    best_epoch: int
    best_checkpoint: object = None


def select_epoch(aucs) -> int:
    """Index of the highest AUC, first occurrence on ties."""
    if not len(aucs):
        raise InvalidInputError("no epochs to select from")
    return int(np.argmax(np.asarray(aucs, dtype=np.float64)))


def validate_per_epoch(checkpoints, dataset, variant, scorer) -> EpochSelection:
    """Score ``dataset`` with each checkpoint and keep the best-AUC epoch.

    ``scorer(checkpoint, dataset, variant)`` returns one score per patch.
    """
    checkpoints = list(checkpoints)
    if not checkpoints:
        raise InvalidInputError("validation needs at least one checkpoint")
    labels = dataset.labels()
    aucs = [roc_auc(scorer(ck, dataset, variant), labels).auc for ck in checkpoints]
    best = select_epoch(aucs)
    return EpochSelection(aucs, best, checkpoints[best])


# ------------------------------------------------------------------- output

def roc_table(report: EvalReport) -> str:
    lines = ["fpr\ttpr"] + [f"{f!r}\t{t!r}" for f, t in report.roc_points]
    return "\n".join(lines) + "\n"


def write_roc_svg(path, report: EvalReport, title: str = "ROC") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fpr, tpr = zip(*report.roc_points)
    with plt.rc_context({"svg.hashsalt": "panogan", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        ax.plot(fpr, tpr, lw=1.5, label=f"AUC = {report.auc:.4f}")
        ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="grey")
        if report.sensitivity is not None:
            ax.plot([1 - report.specificity], [report.sensitivity], "o", color="crimson",
                    label=f"Youden J = {report.youden_j:.3f}")
        ax.set(xlim=(0, 1), ylim=(0, 1.01), xlabel="1 - specificity", ylabel="sensitivity",
               title=title)
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
