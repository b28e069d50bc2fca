"""Evaluation metrics: classification, concept quality, segmentation IoU."""

from __future__ import annotations

import numpy as np


def confusion_matrix(y_true, y_pred, n_classes) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def overall_accuracy(cm) -> float:
    total = cm.sum()
    return float(np.trace(cm) / total) if total else 0.0


def mean_accuracy(cm) -> float:
    """Unweighted mean of per-class recalls; empty classes are skipped."""
    support = cm.sum(axis=1)
    present = support > 0
    if not present.any():
        return 0.0
    recalls = np.diag(cm)[present] / support[present]
    return float(recalls.mean())


def matthews_corrcoef(cm) -> float:
    """Multiclass MCC from the full confusion matrix (Gorodkin form).

    Defined as 0 when either denominator factor vanishes.
    """
    cm = np.asarray(cm, dtype=np.float64)
    t = cm.sum(axis=1)              # true-class totals
    p = cm.sum(axis=0)              # predicted totals
    s = cm.sum()
    c = np.trace(cm)
    num = c * s - float(t @ p)
    d1 = s * s - float(p @ p)
    d2 = s * s - float(t @ t)
    if d1 <= 0.0 or d2 <= 0.0:
        return 0.0
    return float(num / np.sqrt(d1 * d2))


def classification_metrics(y_true, y_pred, n_classes, anatomy_of_class=None):
    """OA / MA / MCC plus per-anatomy sensitivity and specificity.

    ``anatomy_of_class`` maps class index -> (anatomy, is_positive); the
    positive class per anatomy is its SP class.  Sensitivity is recall of
    SP within the anatomy's samples, specificity recall of NSP.
    """
    cm = confusion_matrix(y_true, y_pred, n_classes)
    out = {
        "OA": overall_accuracy(cm),
        "MA": mean_accuracy(cm),
        "MCC": matthews_corrcoef(cm),
    }
    if anatomy_of_class:
        y_true = np.asarray(y_true)
        y_pred = np.asarray(y_pred)
        per = {}
        for ci, (anatomy, positive) in anatomy_of_class.items():
            if not positive:
                continue
            key = anatomy
            pos_mask = y_true == ci
            neg_class = next(cj for cj, (a2, p2) in anatomy_of_class.items()
                             if a2 == anatomy and not p2)
            neg_mask = y_true == neg_class
            sens = float((y_pred[pos_mask] == ci).mean()) if pos_mask.any() else float("nan")
            spec = float((y_pred[neg_mask] == neg_class).mean()) if neg_mask.any() else float("nan")
            per[key] = {"sensitivity": sens, "specificity": spec}
        out["per_anatomy"] = per
    return out


def concept_metrics(pred, target, applicability, binary_indices, scalar_indices):
    """RMSE over applicable scalar entries, COA over applicable binaries.

    A binary prediction counts as true when strictly above 0.5, so a
    prediction sitting exactly on 0.5 compares as "false".
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    app = np.asarray(applicability, dtype=bool)

    s_mask = app[:, scalar_indices]
    diff = (pred[:, scalar_indices] - target[:, scalar_indices])[s_mask]
    rmse = float(np.sqrt(np.mean(diff ** 2))) if diff.size else 0.0

    b_mask = app[:, binary_indices]
    pb = (pred[:, binary_indices] > 0.5)[b_mask]
    tb = (target[:, binary_indices] > 0.5)[b_mask]
    coa = float((pb == tb).mean()) if pb.size else 1.0
    return {"RMSE": rmse, "COA": coa}


def iou_per_class(pred_mask, target_mask, n_classes):
    """Per-class IoU of argmax masks; classes absent from both sides are NaN.

    NaN entries are excluded from any mean the caller takes.
    """
    pred_mask = np.asarray(pred_mask)
    target_mask = np.asarray(target_mask)
    out = np.full(n_classes, np.nan)
    for c in range(n_classes):
        p = pred_mask == c
        t = target_mask == c
        union = np.logical_or(p, t).sum()
        if union:
            out[c] = np.logical_and(p, t).sum() / union
    return out


def mean_foreground_iou(pred_mask, target_mask, n_classes) -> float:
    per = iou_per_class(pred_mask, target_mask, n_classes)[1:]
    per = per[~np.isnan(per)]
    return float(per.mean()) if per.size else 0.0
