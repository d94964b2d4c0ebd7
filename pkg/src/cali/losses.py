"""Segmentation, domain, discrepancy and weight-regularization losses.

All reductions are per-pixel means so magnitudes do not depend on resolution.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import numpy as np

from . import diffcore as dc
from .diffcore import DimensionError, Tensor, UsageError

SOURCE, TARGET = 1, 0


class ValidationError(ValueError):
    pass


@dataclass
class LossBreakdown:
    iteration: int = 0
    l_seg: float = float("nan")
    v1: float = float("nan")
    ce_s: float = float("nan")
    ce_t: float = float("nan")
    v2: float = float("nan")
    wr: float = float("nan")

    def update(self, other: "LossBreakdown") -> "LossBreakdown":
        for f in fields(self):
            val = getattr(other, f.name)
            if f.name != "iteration" and not np.isnan(val):
                setattr(self, f.name, val)
        return self


def one_hot(labels: np.ndarray, k: int, dtype=np.float32) -> np.ndarray:
    """(H, W) int labels -> (K, H, W) one-hot."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise ValidationError(f"labels outside [0, {k})")
    return (np.arange(k)[:, None, None] == labels[None]).astype(dtype)


def _check_one_hot(y: np.ndarray) -> None:
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=0) == 1)):
        raise ValidationError("label map is not one-hot per pixel")


def cross_entropy(p: Tensor, y, eps: float = dc.LOG_EPS) -> Tensor:
    """Mean over pixels of -sum_c y_c log p_c for a (K, H, W) probability map."""
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    if p.shape != y.shape:
        raise ValidationError(f"prediction {p.shape} and label {y.shape} shapes differ")
    _check_one_hot(y)
    n_pix = y.shape[1] * y.shape[2]
    return -(dc.log_clamped(p, eps) * Tensor(y, dtype=p.dtype)).sum() * (1.0 / n_pix)


def seg_loss(p1: Tensor, p2: Tensor, y, eps: float = dc.LOG_EPS) -> Tensor:
    """Supervised loss on both heads: -1/2 E[y log(P1 * P2)] with each factor's log clamped."""
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    if p1.shape != p2.shape or p1.shape != y.shape:
        raise ValidationError(f"shape mismatch: {p1.shape}, {p2.shape}, {y.shape}")
    _check_one_hot(y)
    n_pix = y.shape[1] * y.shape[2]
    # log(P1 * P2) = log P1 + log P2, clamping each factor separately
    logs = dc.log_clamped(p1, eps) + dc.log_clamped(p2, eps)
    return -(logs * Tensor(y, dtype=p1.dtype)).sum() * (0.5 / n_pix)


def domain_ce(d_map: Tensor, domain_label: int, eps: float = dc.LOG_EPS) -> Tensor:
    """Binary CE of a discriminator map against a constant domain label (source=1, target=0)."""
    if domain_label == SOURCE:
        return -dc.log_clamped(d_map, eps).mean()
    if domain_label == TARGET:
        return -dc.log_clamped(1.0 - d_map, eps).mean()
    raise UsageError(f"domain label must be 0 (target) or 1 (source), got {domain_label!r}")


def v1(d_source: Tensor, d_target: Tensor) -> Tensor:
    """Joint domain loss -(CE_S + CE_T); D maximizes it, G minimizes it."""
    return -(domain_ce(d_source, SOURCE) + domain_ce(d_target, TARGET))


def discrepancy(p: Tensor, q: Tensor) -> Tensor:
    """(1/K) * |p - q|_1 over the class axis, averaged over any remaining pixels."""
    if p.shape != q.shape:
        raise DimensionError(f"class maps differ: {p.shape} vs {q.shape}")
    k = p.shape[0]
    per_pixel = dc.tabs(p - q).sum(axis=0) * (1.0 / k)
    return per_pixel.mean() if per_pixel.data.ndim else per_pixel


def head_weight_vector(head: dict[str, Tensor]) -> Tensor:
    """Flatten all convolution kernels of a head (biases excluded) into one vector."""
    ws = [dc.flatten(t) for name, t in sorted(head.items()) if name.endswith(".weight")]
    return dc.concat(ws)


def weight_reg(c1: dict[str, Tensor], c2: dict[str, Tensor]) -> Tensor:
    """Cosine similarity between the flattened weights of the two heads."""
    w1, w2 = head_weight_vector(c1), head_weight_vector(c2)
    if w1.shape != w2.shape:
        raise DimensionError(f"heads have different sizes: {w1.shape} vs {w2.shape}")
    n1 = float(np.linalg.norm(w1.data))
    n2 = float(np.linalg.norm(w2.data))
    if n1 == 0.0 or n2 == 0.0:
        warnings.warn("zero-norm head weights; cosine similarity defined as 0")
        return (w1 * 0.0).sum()
    dot = (w1 * w2).sum()
    norms = dc.sqrt(dc.square(w1).sum()) * dc.sqrt(dc.square(w2).sum())
    return dot / norms
