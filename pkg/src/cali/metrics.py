"""Confusion matrices, per-class IoU, mIoU* and target discrepancy."""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import diffcore as dc
from .losses import ValidationError, discrepancy


class UndefinedResult(ArithmeticError):
    pass


def confusion(k: int) -> np.ndarray:
    return np.zeros((k, k), dtype=np.int64)


def accumulate(cm: np.ndarray, pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Add one prediction/ground-truth pair into ``cm`` (rows truth, cols prediction)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValidationError(f"pred {pred.shape} and truth {truth.shape} differ")
    k = cm.shape[0]
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValidationError(f"{name} label outside [0, {k})")
    cm += np.bincount(truth.ravel() * k + pred.ravel(), minlength=k * k).reshape(k, k)
    return cm


def iou(cm: np.ndarray, c: int) -> float:
    """IoU of class ``c``; NaN when the class never appears in truth or prediction."""
    tp = cm[c, c]
    denom = cm[c, :].sum() + cm[:, c].sum() - tp
    return float("nan") if denom == 0 else float(tp / denom)


def per_class_iou(cm: np.ndarray) -> np.ndarray:
    return np.array([iou(cm, c) for c in range(cm.shape[0])])


def miou_star(cm: np.ndarray, evaluated: Iterable[int] | None = None) -> float:
    """Mean IoU over ``evaluated`` classes, skipping absent ones."""
    classes = list(range(cm.shape[0])) if evaluated is None else list(evaluated)
    if not classes:
        raise ValidationError("evaluated class set is empty")
    vals = [iou(cm, c) for c in classes]
    present = [v for v in vals if not np.isnan(v)]
    if not present:
        raise UndefinedResult("no evaluated class is present")
    return float(np.mean(present))


def evaluate_model(model, samples: Sequence, k: int, head: str = "mean") -> np.ndarray:
    cm = confusion(k)
    for s in samples:
        accumulate(cm, model.predict(s.image, head), s.label)
    return cm


def mean_target_discrepancy(model, images: Sequence[np.ndarray]) -> float:
    if len(images) == 0:
        raise dc.UsageError("empty target sample")
    vals = []
    with dc.no_grad():
        for x in images:
            f = model.features(x)
            vals.append(discrepancy(model.classify("C1", f), model.classify("C2", f)).item())
    return float(np.mean(vals))


def iou_table_csv(cm: np.ndarray) -> str:
    rows = ["class,iou,present"]
    for c in range(cm.shape[0]):
        v = iou(cm, c)
        present = not np.isnan(v)
        rows.append(f"{c},{v:.6g},{int(present)}" if present else f"{c},nan,0")
    return "\n".join(rows) + "\n"
