"""Supervised, clustering, multi-view, and confidence losses plus analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    PROB_FLOOR,
    NonFiniteInput,
    OwsslError,
    ProbMatrix,
    ShapeMismatch,
    softmax,
    _as_float_vector,
)
from .sinkhorn import Assignment


class NonFiniteComponent(OwsslError):
    pass


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term losses; `total` is their exact (weighted) sum."""

    sup: float
    cls: float
    conf: float
    total: float
    retained_fraction: float = 0.0


def cross_entropy(target, pred) -> float:
    """H(t, p) = -sum t_i log p_i with predictions floored at 1e-12."""
    t = _as_float_vector(target, "target")
    p = _as_float_vector(pred, "pred")
    if t.shape != p.shape:
        raise ShapeMismatch(f"target shape {t.shape} != pred shape {p.shape}")
    return float(-(t * np.log(np.maximum(p, PROB_FLOOR))).sum())


def _colwise_cross_entropy(targets: np.ndarray, preds: np.ndarray) -> np.ndarray:
    if targets.shape != preds.shape:
        raise ShapeMismatch(f"target shape {targets.shape} != pred shape {preds.shape}")
    return -(targets * np.log(np.maximum(preds, PROB_FLOOR))).sum(axis=0)


def supervised_loss(labels, preds: ProbMatrix) -> float:
    """Mean cross-entropy against one-hot ground truth; 0 for an empty block."""
    idx = np.asarray(labels, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatch("labels must be a 1-D vector of class indices")
    if idx.size == 0:
        return 0.0
    if idx.size != preds.n:
        raise ShapeMismatch(f"{idx.size} labels for {preds.n} prediction columns")
    if idx.min() < 0 or idx.max() >= preds.k:
        raise ShapeMismatch("label index outside 0..K-1")
    picked = preds.data[idx, np.arange(idx.size)]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def clustering_loss(assignment: Assignment, preds: ProbMatrix) -> float:
    """Mean cross-entropy between optimized self-labels and predictions."""
    q = assignment.q
    return float(_colwise_cross_entropy(q.data, preds.data).sum() / q.n)


def clustering_loss_multiview(
    assignment: Assignment, global_preds: ProbMatrix, local_preds: Sequence[ProbMatrix]
) -> float:
    """Self-label cross-entropy averaged over the global view and V local views.

    With an empty view list this reduces bitwise to `clustering_loss`.
    """
    q = assignment.q
    terms = _colwise_cross_entropy(q.data, global_preds.data)
    for view in local_preds:
        terms = terms + _colwise_cross_entropy(q.data, view.data)
    return float(terms.sum() / ((len(local_preds) + 1) * q.n))


def confidence_loss(pseudo, strong_preds: ProbMatrix) -> float:
    """Masked cross-entropy of strong-view predictions against pseudo-labels.

    Normalizes by the total sample count, not the retained count, so
    raising a threshold can only remove non-negative terms.
    """
    if pseudo.labels.size != strong_preds.n:
        raise ShapeMismatch(f"{pseudo.labels.size} pseudo-labels for {strong_preds.n} columns")
    n = strong_preds.n
    if not pseudo.mask.any():
        return 0.0
    picked = strong_preds.data[pseudo.labels, np.arange(n)]
    losses = -np.log(np.maximum(picked, PROB_FLOOR))
    return float((losses * pseudo.mask).sum() / n)


def total_loss(
    sup: float,
    cls: float,
    conf: float,
    retained_fraction: float = 0.0,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> LossBreakdown:
    """Combine the three terms; default weights give the plain unweighted sum."""
    parts = (weights[0] * sup, weights[1] * cls, weights[2] * conf)
    if not all(np.isfinite(parts)):
        raise NonFiniteComponent(f"non-finite loss component in {parts}")
    return LossBreakdown(
        sup=parts[0],
        cls=parts[1],
        conf=parts[2],
        total=parts[0] + parts[1] + parts[2],
        retained_fraction=retained_fraction,
    )


def ce_logit_gradient(target, logits) -> np.ndarray:
    """Gradient of H(target, softmax(logits)) with respect to the logits."""
    t = _as_float_vector(target, "target")
    z = _as_float_vector(logits, "logits")
    if t.shape != z.shape:
        raise ShapeMismatch(f"target shape {t.shape} != logits shape {z.shape}")
    if not np.all(np.isfinite(t)):
        raise NonFiniteInput("target contains non-finite entries")
    return softmax(z) - t
