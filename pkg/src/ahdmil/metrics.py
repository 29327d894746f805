"""Classification and calibration metrics, plus the paired t-test."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats


def _auc_binary(scores, positive):
    """Mann-Whitney AUC with ties counted one half."""
    pos = scores[positive]
    neg = scores[~positive]
    if pos.size == 0 or neg.size == 0:
        return None
    # rank-based form of the pair count
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def macro_auc(scores, labels):
    """One-vs-rest AUC averaged over classes.

    ``scores`` is (n, C). With C == 2 this is the AUC of the class-1 score.
    Classes without both positives and negatives are skipped; returns
    ``(value or None, notes)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores = np.stack([1.0 - scores, scores], axis=1)
    n_classes = scores.shape[1]
    if n_classes == 2:
        auc = _auc_binary(scores[:, 1], labels == 1)
        return auc, ([] if auc is not None else ["single-class labels: AUC undefined"])
    values, notes = [], []
    for c in range(n_classes):
        auc = _auc_binary(scores[:, c], labels == c)
        if auc is None:
            notes.append(f"class {c} skipped: needs positives and negatives")
        else:
            values.append(auc)
    if not values:
        return None, notes + ["all classes degenerate: AUC undefined"]
    return float(np.mean(values)), notes


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    return float(np.mean(preds == labels))


def macro_f1(preds, labels, n_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1; a class never predicted nor present scores 0."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.size == 0:
        raise ValueError("F1 of an empty prediction set")
    if n_classes is None:
        n_classes = int(max(preds.max(), labels.max())) + 1
    f1s = []
    for c in range(n_classes):
        tp = np.sum((preds == c) & (labels == c))
        fp = np.sum((preds == c) & (labels != c))
        fn = np.sum((preds != c) & (labels == c))
        denom = 2 * tp + fp + fn
        f1s.append(0.0 if denom == 0 else 2.0 * tp / denom)
    return float(np.mean(f1s))


def brier(probs, labels) -> float:
    """Binary: mean (p_1 - y)^2. Multiclass: mean over samples of the one-hot squared error."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-6) or np.any(probs < 0):
        raise ValueError("probability rows must lie on the simplex")
    if probs.shape[1] == 2:
        return float(np.mean((probs[:, 1] - (labels == 1)) ** 2))
    onehot = np.eye(probs.shape[1])[labels]
    return float(np.mean(((probs - onehot) ** 2).sum(axis=1)))


@dataclass
class CalibrationBin:
    lo: float
    hi: float
    mean_conf: float | None
    obs_freq: float | None
    count: int


def calibration_curve(confidences, correct, n_bins: int = 10) -> list:
    """Equal-width bins on [0, 1]; the last bin is closed on the right."""
    conf = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=np.float64)
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in [0, 1]")
    idx = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    bins = []
    for b in range(n_bins):
        sel = idx == b
        count = int(sel.sum())
        bins.append(
            CalibrationBin(
                lo=b / n_bins,
                hi=(b + 1) / n_bins,
                mean_conf=float(conf[sel].mean()) if count else None,
                obs_freq=float(correct[sel].mean()) if count else None,
                count=count,
            )
        )
    return bins


def calibration_inputs(probs, labels):
    """Binary: positive-class confidence vs label. Multiclass: max probability vs correctness."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.shape[1] == 2:
        return probs[:, 1], (labels == 1).astype(float)
    return probs.max(axis=1), (probs.argmax(axis=1) == labels).astype(float)


def paired_t_test(a, b) -> float:
    """Two-sided p-value of the paired t-test on ``a - b``.

    Zero-variance differences give p = 1.0 when their mean is zero and
    p = 0.0 otherwise.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.size < 2:
        raise ValueError("paired t-test needs at least two pairs")
    sd = d.std(ddof=1)
    if sd == 0:
        return 1.0 if d.mean() == 0 else 0.0
    t = d.mean() / (sd / np.sqrt(d.size))
    return float(2.0 * stats.t.sf(abs(t), df=d.size - 1))


@dataclass
class MetricsReport:
    n_samples: int
    acc: float
    macro_f1: float
    brier: float
    auc: float | None
    auc_notes: list = field(default_factory=list)
    calibration: list = field(default_factory=list)
    retention_mean: float | None = None
    retention_std: float | None = None
    per_bag_correct: list = field(default_factory=list)
    p_value_vs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def build_report(probs, labels, retention=None, n_bins: int = 10) -> MetricsReport:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot report on an empty split")
    preds = probs.argmax(axis=1)
    auc, notes = macro_auc(probs, labels)
    conf, hit = calibration_inputs(probs, labels)
    ret = None if retention is None else np.asarray(retention, dtype=np.float64)
    return MetricsReport(
        n_samples=int(labels.size),
        acc=accuracy(preds, labels),
        macro_f1=macro_f1(preds, labels, probs.shape[1]),
        brier=brier(probs, labels),
        auc=auc,
        auc_notes=notes,
        calibration=[asdict(b) for b in calibration_curve(conf, hit, n_bins)],
        retention_mean=None if ret is None else float(ret.mean()),
        retention_std=None if ret is None else float(ret.std()),
        per_bag_correct=[int(v) for v in (preds == labels)],
    )
