"""EMA learning-status tracking and hierarchical confidence thresholds.

Classes are grouped into seen and novel sets whose learning paces differ;
each group tracks its own mean confidence (eta) and every class its own
(zeta). The threshold for a class is its group's eta scaled by the ratio
of the class zeta to the group's best zeta, so weak classes inside a group
get proportionally lower cutoffs while the two groups stay isolated.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .core import OwsslError, PartitionSpec, ProbMatrix, ShapeMismatch


class DegenerateGroup(OwsslError):
    pass


@dataclass(frozen=True)
class ThresholdState:
    """Per-class and per-group learning-status estimates tracked by EMA."""

    zeta: np.ndarray
    eta_seen: float
    eta_novel: float
    momentum: float
    partition: PartitionSpec

    def __post_init__(self):
        zeta = np.asarray(self.zeta, dtype=np.float64)
        if zeta.shape != (self.partition.k_total,):
            raise ShapeMismatch(f"zeta shape {zeta.shape} does not match K={self.partition.k_total}")
        if np.any(zeta < 0) or np.any(zeta > 1):
            raise ValueError("zeta entries must lie in [0, 1]")
        if not (0 <= self.eta_seen <= 1 and 0 <= self.eta_novel <= 1):
            raise ValueError("eta values must lie in [0, 1]")
        if not (0.0 <= self.momentum <= 1.0):
            raise ValueError("momentum must lie in [0, 1]")
        zeta = zeta.copy()
        zeta.flags.writeable = False
        object.__setattr__(self, "zeta", zeta)

    @classmethod
    def initial(cls, partition: PartitionSpec, momentum: float = 0.999) -> "ThresholdState":
        # uniform-confidence start: 1/K for every class and group
        start = 1.0 / partition.k_total
        return cls(
            zeta=np.full(partition.k_total, start),
            eta_seen=start,
            eta_novel=start,
            momentum=momentum,
            partition=partition,
        )

    def eta_of(self, c: int) -> float:
        return self.eta_seen if self.partition.is_seen[c] else self.eta_novel

    def to_dict(self) -> dict:
        return {
            "zeta": [float(z) for z in self.zeta],
            "eta_seen": float(self.eta_seen),
            "eta_novel": float(self.eta_novel),
            "momentum": float(self.momentum),
        }

    @classmethod
    def from_dict(cls, payload: dict, partition: PartitionSpec) -> "ThresholdState":
        """Rebuild a snapshot written by `to_dict` (run-log resumability)."""
        return cls(
            zeta=np.asarray(payload["zeta"], dtype=np.float64),
            eta_seen=payload["eta_seen"],
            eta_novel=payload["eta_novel"],
            momentum=payload["momentum"],
            partition=partition,
        )


@dataclass(frozen=True)
class PseudoBatch:
    """Confidence-filtered pseudo-labels: mask[i] is true iff conf[i] > tau(label[i])."""

    mask: np.ndarray
    labels: np.ndarray
    confidences: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool)
        labels = np.asarray(self.labels, dtype=np.int64)
        conf = np.asarray(self.confidences, dtype=np.float64)
        if not (mask.shape == labels.shape == conf.shape) or mask.ndim != 1:
            raise ShapeMismatch("mask, labels, and confidences must be equal-length vectors")
        for arr, name in ((mask, "mask"), (labels, "labels"), (conf, "confidences")):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def retained_fraction(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0


def update_state(state: ThresholdState, probs: ProbMatrix) -> ThresholdState:
    """Fold a batch of predictions into the EMA learning statuses.

    Batch statistics are means of the top confidence over samples whose
    argmax falls in each class/group; classes or groups that receive no
    samples keep their previous value unchanged.
    """
    k = state.partition.k_total
    if probs.k != k:
        raise ShapeMismatch(f"matrix has {probs.k} rows, partition expects {k}")
    conf = probs.data.max(axis=0)
    pred = probs.data.argmax(axis=0)
    m = state.momentum

    counts = np.bincount(pred, minlength=k)
    sums = np.bincount(pred, weights=conf, minlength=k)
    hit = counts > 0
    batch_zeta = np.where(hit, sums / np.maximum(counts, 1), 0.0)
    zeta = np.where(hit, m * state.zeta + (1.0 - m) * batch_zeta, state.zeta)

    seen_samples = state.partition.is_seen[pred]
    eta_seen = state.eta_seen
    if seen_samples.any():
        eta_seen = m * eta_seen + (1.0 - m) * float(conf[seen_samples].mean())
    eta_novel = state.eta_novel
    if (~seen_samples).any():
        eta_novel = m * eta_novel + (1.0 - m) * float(conf[~seen_samples].mean())

    return replace(state, zeta=zeta, eta_seen=eta_seen, eta_novel=eta_novel)


def _group_max(state: ThresholdState, members: tuple[int, ...]) -> float:
    peak = float(state.zeta[list(members)].max())
    if peak <= 0:
        raise DegenerateGroup("every zeta in the group is zero")
    return peak


def hierarchical_threshold(state: ThresholdState, c: int) -> float:
    """Threshold for class c: (zeta_c / max zeta in its group) * group eta."""
    if not (0 <= c < state.partition.k_total):
        raise ValueError(f"class index {c} out of range")
    members = state.partition.seen if state.partition.is_seen[c] else state.partition.novel
    return float(state.zeta[c]) / _group_max(state, members) * state.eta_of(c)


def thresholds(state: ThresholdState) -> np.ndarray:
    """Vector of per-class thresholds (same rule as hierarchical_threshold)."""
    tau = np.zeros(state.partition.k_total)
    for members, eta in (
        (state.partition.seen, state.eta_seen),
        (state.partition.novel, state.eta_novel),
    ):
        if not members:
            continue
        idx = list(members)
        tau[idx] = state.zeta[idx] / _group_max(state, members) * eta
    return tau


def make_pseudo_batch(state: ThresholdState, probs: ProbMatrix) -> PseudoBatch:
    """Argmax pseudo-labels (ties to the lowest index) with the strict-> mask."""
    if probs.k != state.partition.k_total:
        raise ShapeMismatch(f"matrix has {probs.k} rows, partition expects {state.partition.k_total}")
    conf = probs.data.max(axis=0)
    labels = probs.data.argmax(axis=0)
    tau = thresholds(state)
    mask = conf > tau[labels]
    return PseudoBatch(mask=mask, labels=labels, confidences=conf)
