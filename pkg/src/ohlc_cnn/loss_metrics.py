"""Binary cross-entropy loss, thresholded classification, and evaluation metrics."""

from dataclasses import dataclass

import numpy as np

# Predicted probabilities are clamped into [PROB_CLAMP, 1 - PROB_CLAMP]
# before any log, so a saturated prediction can never produce inf/nan.
PROB_CLAMP = 1e-7


def bce_loss(preds, labels) -> float:
    """Mean binary cross-entropy over a batch of probabilities and 0/1 labels."""
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("bce_loss: empty input")
    if p.size != y.size:
        raise ValueError(f"bce_loss: {p.size} predictions vs {y.size} labels")
    p = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


def bce_grad(pred, label):
    """Derivative of the per-sample cross-entropy w.r.t. the predicted probability.

    (p - y) / (p * (1 - p)), with p clamped like bce_loss. Multiplying by the
    sigmoid derivative p*(1-p) collapses this to the usual (p - y) at the
    output pre-activation.
    """
    p = np.clip(np.asarray(pred, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(label, dtype=np.float64)
    g = (p - y) / (p * (1.0 - p))
    if g.ndim == 0:
        return float(g)
    return g


def classify(pred, threshold: float = 0.5):
    """Threshold probabilities into 0/1 labels; pred == threshold goes to class 1."""
    out = (np.asarray(pred, dtype=np.float64) >= threshold).astype(np.int64)
    if out.ndim == 0:
        return int(out)
    return out


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(preds, labels, threshold: float = 0.5) -> ConfusionMatrix:
    """Count TP/FP/TN/FN for thresholded predictions against 0/1 labels."""
    p = np.asarray(preds, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if p.size != y.size:
        raise ValueError(f"confusion: {p.size} predictions vs {y.size} labels")
    pred_pos = p >= threshold
    actual_pos = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred_pos & actual_pos)),
        fp=int(np.sum(pred_pos & ~actual_pos)),
        tn=int(np.sum(~pred_pos & ~actual_pos)),
        fn=int(np.sum(~pred_pos & actual_pos)),
    )


def _safe_ratio(num: float, den: float) -> tuple[float, bool]:
    # zero denominator -> (0, degenerate) rather than a crash or nan
    if den == 0:
        return 0.0, True
    return num / den, False


def accuracy(cm: ConfusionMatrix) -> float:
    return _safe_ratio(cm.tp + cm.tn, cm.total)[0]


def precision(cm: ConfusionMatrix) -> float:
    return _safe_ratio(cm.tp, cm.tp + cm.fp)[0]


def recall(cm: ConfusionMatrix) -> float:
    return _safe_ratio(cm.tp, cm.tp + cm.fn)[0]


def f1(cm: ConfusionMatrix) -> float:
    p = precision(cm)
    r = recall(cm)
    return _safe_ratio(2.0 * p * r, p + r)[0]


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    degenerate: tuple[str, ...] = ()


def compute_metrics(cm: ConfusionMatrix) -> MetricReport:
    """All four metrics plus the names of any that hit a zero denominator."""
    degenerate = []
    acc, d = _safe_ratio(cm.tp + cm.tn, cm.total)
    if d:
        degenerate.append("accuracy")
    prec, d = _safe_ratio(cm.tp, cm.tp + cm.fp)
    if d:
        degenerate.append("precision")
    rec, d = _safe_ratio(cm.tp, cm.tp + cm.fn)
    if d:
        degenerate.append("recall")
    f1_score, d = _safe_ratio(2.0 * prec * rec, prec + rec)
    if d:
        degenerate.append("f1")
    return MetricReport(acc, prec, rec, f1_score, tuple(degenerate))
