"""Diagnostic metrics: accuracy, ROC curve with trapezoidal AUC, bootstrap CI."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataInvariantError


def accuracy(preds, labels) -> float:
    """Fraction of predictions equal to the labels."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise DataInvariantError("predictions and labels differ in length")
    if preds.size == 0:
        raise DataInvariantError("accuracy of an empty set is undefined")
    return float(np.count_nonzero(preds == labels)) / preds.size


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending; the first entry is +inf (nothing flagged)
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    ci_low: float = float("nan")
    ci_high: float = float("nan")

    def to_csv(self) -> str:
        lines = ["threshold,fpr,tpr"]
        for t, f, p in zip(self.thresholds, self.fpr, self.tpr):
            lines.append(f"{float(t)!r},{float(f)!r},{float(p)!r}")
        return "\n".join(lines) + "\n"


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataInvariantError("scores and labels must be 1-D and equally long")
    if not np.isfinite(scores).all():
        raise DataInvariantError("scores must be finite")
    if not np.isin(labels, (0, 1)).all():
        raise DataInvariantError("labels must be 0 or 1")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise DataInvariantError("ROC analysis needs both classes present")
    return scores, labels


def _roc_counts(scores, labels) -> tuple:
    scores, labels = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.r_[0, np.cumsum(y)[ends]]
    fp = np.r_[0, ends + 1 - tp[1:]]
    return np.r_[np.inf, s[ends]], tp, fp


def roc_points(scores, labels) -> tuple:
    """(thresholds, fpr, tpr) sweeping every distinct score, ties as one step."""
    thresholds, tp, fp = _roc_counts(scores, labels)
    return thresholds, fp / fp[-1], tp / tp[-1]


def _auc_from_counts(tp: np.ndarray, fp: np.ndarray) -> float:
    # trapezoids in integer arithmetic, one division at the end
    twice_area = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    return twice_area / (2 * int(tp[-1]) * int(fp[-1]))


def roc_auc(scores, labels) -> float:
    _, tp, fp = _roc_counts(scores, labels)
    return _auc_from_counts(tp, fp)


def roc_curve(scores, labels, ci: bool = False, n_boot: int = 1000,
              level: float = 0.95, seed: int = 0) -> RocCurve:
    thresholds, tp, fp = _roc_counts(scores, labels)
    curve = RocCurve(thresholds, fp / fp[-1], tp / tp[-1], _auc_from_counts(tp, fp))
    if ci:
        curve.ci_low, curve.ci_high = auc_ci(scores, labels, n_boot, level, seed)
    return curve


def auc_ci(scores, labels, n_boot: int = 1000, level: float = 0.95, seed: int = 0) -> tuple:
    """Stratified percentile bootstrap interval for the ROC AUC.

    Positives and negatives are resampled separately so every replicate keeps
    the original class sizes.
    """
    scores, labels = _check_binary(scores, labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    if len(pos) < 2 or len(neg) < 2:
        raise DataInvariantError("bootstrap CI needs at least 2 samples per class")
    rng = np.random.default_rng(seed)
    y = np.r_[np.ones(len(pos), np.int64), np.zeros(len(neg), np.int64)]
    aucs = np.empty(n_boot)
    for b in range(n_boot):
        bp = pos[rng.integers(0, len(pos), len(pos))]
        bn = neg[rng.integers(0, len(neg), len(neg))]
        aucs[b] = roc_auc(np.r_[bp, bn], y)
    alpha = (1.0 - level) / 2.0
    low, high = np.quantile(aucs, [alpha, 1.0 - alpha])
    return float(low), float(high)


def mean_std(values) -> tuple:
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())


def format_mean_std(values, digits: int = 3) -> str:
    """Render as ``0.963 ± 0.005``."""
    m, s = mean_std(values)
    return f"{m:.{digits}f} ± {s:.{digits}f}"


def plot_roc(curve: RocCurve, path, title: str = "") -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(curve.fpr, curve.tpr, color="#aa3377", label=f"AUC {curve.auc:.3f}")
    ax.plot([0, 1], [0, 1], color="0.6", linestyle=":")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
