"""Segmentation and classification metrics over explicit confusion counts."""

from __future__ import annotations

import numpy as np


def _safe_ratio(num: float, den: float) -> float:
    # Degenerate denominators mean "no cases to get wrong": score 1.0.
    return 1.0 if den == 0 else num / den


def confusion_binary(pred, true) -> np.ndarray:
    """2x2 confusion matrix [[tn, fp], [fn, tp]] from binary arrays."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs true {true.shape}")
    p = pred.astype(bool)
    t = true.astype(bool)
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    return np.array([[tn, fp], [fn, tp]], dtype=np.int64)


def confusion_matrix(pred_labels, true_labels, n_classes: int) -> np.ndarray:
    """L x L count matrix, rows = true class, columns = predicted class."""
    pred = np.asarray(pred_labels).astype(np.int64).ravel()
    true = np.asarray(true_labels).astype(np.int64).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs true {true.shape}")
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    bad = (pred < 0) | (pred >= n_classes) | (true < 0) | (true >= n_classes)
    if bad.any():
        raise ValueError("labels outside [0, n_classes)")
    mat = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(mat, (true, pred), 1)
    return mat


def micro_pool(counts: list[np.ndarray]) -> np.ndarray:
    """Element-wise sum of confusion count matrices."""
    if not counts:
        raise ValueError("micro_pool: empty list")
    shape = counts[0].shape
    for c in counts:
        if np.asarray(c).shape != shape:
            raise ValueError("micro_pool: mismatched confusion shapes")
    return np.sum([np.asarray(c, dtype=np.int64) for c in counts], axis=0)


def seg_metrics(pred_mask, true_mask) -> dict[str, float]:
    """Overlap metrics for one binary mask pair.

    Both masks empty counts as perfect agreement (dice = iou = 1).
    """
    m = confusion_binary(pred_mask, true_mask)
    tn, fp = int(m[0, 0]), int(m[0, 1])
    fn, tp = int(m[1, 0]), int(m[1, 1])
    total = tn + fp + fn + tp
    return {
        "dice": _safe_ratio(2 * tp, 2 * tp + fp + fn),
        "iou": _safe_ratio(tp, tp + fp + fn),
        "pixel_acc": _safe_ratio(tp + tn, total),
        "precision": _safe_ratio(tp, tp + fp),
        "recall": _safe_ratio(tp, tp + fn),
        "specificity": _safe_ratio(tn, tn + fp),
    }


def kappa_edge_policy(p_o: float, p_e: float) -> float:
    """Cohen's kappa with the degenerate-marginals rule.

    When expected agreement is 1 the usual formula divides by zero; perfect
    observed agreement then scores 1.0 and anything less scores 0.0.
    """
    if p_e >= 1.0:
        return 1.0 if p_o >= 1.0 else 0.0
    return (p_o - p_e) / (1.0 - p_e)


def cohens_kappa(confusion: np.ndarray) -> float:
    m = np.asarray(confusion, dtype=np.float64)
    n = m.sum()
    if n == 0:
        raise ValueError("kappa of an empty confusion matrix")
    p_o = np.trace(m) / n
    p_e = float(np.sum(m.sum(axis=0) * m.sum(axis=1)) / (n * n))
    return kappa_edge_policy(float(p_o), p_e)


def _per_class_counts(m: np.ndarray, c: int) -> tuple[int, int, int, int]:
    tp = int(m[c, c])
    fp = int(m[:, c].sum() - tp)
    fn = int(m[c, :].sum() - tp)
    tn = int(m.sum() - tp - fp - fn)
    return tp, fp, fn, tn


def cls_metrics(confusion: np.ndarray) -> dict[str, float]:
    """Agreement metrics from an L x L confusion matrix.

    Binary matrices score the positive class 1; larger matrices are
    macro-averaged over classes.
    """
    m = np.asarray(confusion, dtype=np.int64)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
        raise ValueError(f"confusion must be square LxL with L >= 2, got {m.shape}")
    n = int(m.sum())
    if n == 0:
        raise ValueError("empty confusion matrix")
    n_classes = m.shape[0]
    out = {"kappa": cohens_kappa(m), "accuracy": np.trace(m) / n}
    if n_classes == 2:
        classes = [1]
    else:
        classes = list(range(n_classes))
    precisions, recalls, f1s, specs = [], [], [], []
    for c in classes:
        tp, fp, fn, tn = _per_class_counts(m, c)
        prec = _safe_ratio(tp, tp + fp)
        rec = _safe_ratio(tp, tp + fn)
        precisions.append(prec)
        recalls.append(rec)
        f1s.append(_safe_ratio(2 * prec * rec, prec + rec) if (prec + rec) > 0 else 0.0)
        specs.append(_safe_ratio(tn, tn + fp))
    out["precision"] = float(np.mean(precisions))
    out["recall"] = float(np.mean(recalls))
    out["f1"] = float(np.mean(f1s))
    out["specificity"] = float(np.mean(specs))
    return out


SEG_METRIC_NAMES = ("dice", "iou", "pixel_acc", "precision", "recall", "specificity")
CLS_METRIC_NAMES = ("kappa", "accuracy", "precision", "recall", "f1", "specificity")

PRIMARY_METRIC = {"seg": "dice", "cls": "kappa", "toy": "loss"}
