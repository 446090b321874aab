"""Hungarian-matched clustering accuracy, distribution bias, and class-count estimation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import ClassPrior, OwsslError, PartitionSpec, Rng, ShapeMismatch


class NonSquare(OwsslError):
    pass


class NonFinite(OwsslError):
    pass


class IndexOutOfRange(OwsslError):
    pass


class EmptySubset(OwsslError):
    pass


class EmptyLabeledSubset(OwsslError):
    pass


def hungarian(cost) -> tuple[np.ndarray, float]:
    """Minimum-cost perfect assignment on a square cost matrix.

    Returns (sigma, total) where sigma[i] is the column assigned to row i
    and total = sum_i cost[i, sigma[i]] is minimal over all permutations.
    """
    mat = np.asarray(cost, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or mat.shape[0] < 1:
        raise NonSquare(f"expected a square matrix, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise NonFinite("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(mat)
    sigma = np.empty(mat.shape[0], dtype=np.int64)
    sigma[rows] = cols
    return sigma, float(mat[rows, cols].sum())


@dataclass(frozen=True)
class MatchResult:
    """Best bijection from predicted cluster indices to ground-truth classes."""

    mapping: np.ndarray
    matched_accuracy: float


def _as_index_vector(values, name: str) -> np.ndarray:
    vec = np.asarray(values, dtype=np.int64)
    if vec.ndim != 1:
        raise ShapeMismatch(f"{name} must be a 1-D index vector")
    return vec


def _contingency(pred: np.ndarray, truth: np.ndarray, size: int) -> np.ndarray:
    table = np.zeros((size, size))
    np.add.at(table, (pred, truth), 1.0)
    return table


def best_cluster_match(pred, truth, size: int | None = None) -> MatchResult:
    """Maximize index agreement over all relabelings of the predictions.

    The contingency table is built at `size` x `size` (indices outside the
    populated block are zero-padded), and the maximization runs through the
    minimizing solver on negated counts.
    """
    pred = _as_index_vector(pred, "pred")
    truth = _as_index_vector(truth, "truth")
    if pred.shape != truth.shape:
        raise ShapeMismatch("pred and truth must have equal length")
    if pred.size == 0:
        raise EmptySubset("no samples to match")
    if size is None:
        size = int(max(pred.max(), truth.max())) + 1
    if pred.min() < 0 or truth.min() < 0 or max(pred.max(), truth.max()) >= size:
        raise IndexOutOfRange("cluster/class index outside 0..size-1")
    table = _contingency(pred, truth, size)
    mapping, neg_total = hungarian(-table)
    return MatchResult(mapping=mapping, matched_accuracy=-neg_total / pred.size)


def clustering_accuracy(pred, truth, mode: str, partition: PartitionSpec) -> float:
    """Accuracy on the seen, novel, or full subset.

    Seen mode uses raw index agreement on samples whose truth is a seen
    class (no matching); novel and all modes take the best Hungarian
    relabeling of the predictions on their subset.
    """
    pred = _as_index_vector(pred, "pred")
    truth = _as_index_vector(truth, "truth")
    if pred.shape != truth.shape:
        raise ShapeMismatch("pred and truth must have equal length")
    if pred.size == 0:
        raise EmptySubset("no samples to score")
    k = partition.k_total
    if pred.min() < 0 or truth.min() < 0 or max(pred.max(), truth.max()) >= k:
        raise IndexOutOfRange("class index outside 0..k_total-1")
    if mode == "seen":
        keep = partition.is_seen[truth]
        if not keep.any():
            raise EmptySubset("no samples from seen classes")
        return float((pred[keep] == truth[keep]).mean())
    if mode == "novel":
        keep = ~partition.is_seen[truth]
        if not keep.any():
            raise EmptySubset("no samples from novel classes")
        return best_cluster_match(pred[keep], truth[keep], size=k).matched_accuracy
    if mode == "all":
        return best_cluster_match(pred, truth, size=k).matched_accuracy
    raise ValueError(f"unknown mode {mode!r}, expected 'seen', 'novel', or 'all'")


def clustering_report(pred, truth, partition: PartitionSpec) -> dict:
    """Seen/novel/all accuracies plus the joint mapping.

    `seen` is raw index agreement; `seen_joint` re-scores the seen subset
    under the joint all-class mapping, since either reading of the seen
    metric is defensible.
    """
    pred = _as_index_vector(pred, "pred")
    truth = _as_index_vector(truth, "truth")
    joint = best_cluster_match(pred, truth, size=partition.k_total)
    remapped = joint.mapping[pred]
    keep = partition.is_seen[truth]
    report = {
        "seen": clustering_accuracy(pred, truth, "seen", partition),
        "novel": clustering_accuracy(pred, truth, "novel", partition),
        "all": joint.matched_accuracy,
        "seen_joint": float((remapped[keep] == truth[keep]).mean()) if keep.any() else 0.0,
        "mapping": [int(c) for c in joint.mapping],
    }
    return report


def manhattan_bias(dist_a: ClassPrior, dist_b: ClassPrior) -> float:
    """Sum of absolute per-class probability differences, in [0, 2]."""
    if dist_a.k != dist_b.k:
        raise ShapeMismatch(f"distributions have {dist_a.k} vs {dist_b.k} classes")
    return float(np.abs(dist_a.probs - dist_b.probs).sum())


def _plus_plus_seeds(points: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[gen.integers(n)]
    dist_sq = np.square(points - centroids[0]).sum(axis=1)
    for j in range(1, k):
        total = dist_sq.sum()
        if total <= 0:
            # all remaining mass on existing centroids; reuse any point
            centroids[j] = points[gen.integers(n)]
            continue
        idx = gen.choice(n, p=dist_sq / total)
        centroids[j] = points[idx]
        dist_sq = np.minimum(dist_sq, np.square(points - centroids[j]).sum(axis=1))
    return centroids


def _lloyd(
    points: np.ndarray, centroids: np.ndarray, max_iters: int, tol: float
) -> tuple[np.ndarray, np.ndarray, float]:
    sq_norms = np.square(points).sum(axis=1)
    for _ in range(max_iters):
        dists = (
            sq_norms[:, None]
            - 2.0 * points @ centroids.T
            + np.square(centroids).sum(axis=1)[None, :]
        )
        labels = dists.argmin(axis=1)
        new_centroids = centroids.copy()
        empties = []
        for j in range(centroids.shape[0]):
            members = labels == j
            if members.any():
                new_centroids[j] = points[members].mean(axis=0)
            else:
                empties.append(j)
        if empties:
            # relocate empty centroids to distinct worst-fit points
            order = np.argsort(-dists[np.arange(points.shape[0]), labels])
            for j, worst in zip(empties, order):
                new_centroids[j] = points[worst]
        shift = float(np.sqrt(np.square(new_centroids - centroids).sum(axis=1)).max())
        centroids = new_centroids
        if shift < tol:
            break
    dists = (
        sq_norms[:, None]
        - 2.0 * points @ centroids.T
        + np.square(centroids).sum(axis=1)[None, :]
    )
    labels = dists.argmin(axis=1)
    inertia = float(np.maximum(dists[np.arange(points.shape[0]), labels], 0.0).sum())
    return centroids, labels, inertia


def kmeans(
    points,
    k: int,
    rng: Rng,
    restarts: int = 10,
    max_iters: int = 100,
    tol: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Lloyd iterations with distance-squared seeding and multiple restarts.

    Each restart draws its seeds from an independent derived stream; the
    restart with the lowest within-cluster sum of squares wins.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ShapeMismatch("points must be a non-empty M x D matrix")
    if not (1 <= k <= pts.shape[0]):
        raise ValueError(f"k={k} must lie in 1..{pts.shape[0]}")
    best: tuple[np.ndarray, np.ndarray, float] | None = None
    for restart in range(restarts):
        gen = rng.derive(restart).generator()
        seeds = _plus_plus_seeds(pts, k, gen)
        centroids, labels, inertia = _lloyd(pts, seeds, max_iters, tol)
        if best is None or inertia < best[2]:
            best = (centroids, labels, inertia)
    return best


def estimate_num_classes(
    features,
    labeled_indices,
    labeled_labels,
    k_candidates: Iterable[int],
    rng: Rng,
    restarts: int = 10,
) -> int:
    """Pick the cluster count whose clustering best matches the labeled subset.

    Runs k-means on all features for every candidate k and scores the
    Hungarian-matched accuracy on the labeled samples; ties break toward
    the smaller k.
    """
    pts = np.asarray(features, dtype=np.float64)
    idx = _as_index_vector(labeled_indices, "labeled_indices")
    lab = _as_index_vector(labeled_labels, "labeled_labels")
    if idx.shape != lab.shape:
        raise ShapeMismatch("labeled indices and labels must have equal length")
    if idx.size == 0:
        raise EmptyLabeledSubset("need at least one labeled sample")
    if idx.min() < 0 or idx.max() >= pts.shape[0]:
        raise IndexOutOfRange("labeled index outside the feature matrix")
    candidates = sorted(set(int(k) for k in k_candidates))
    if not candidates:
        raise ValueError("k_candidates is empty")
    best_k = candidates[0]
    best_acc = -1.0
    for pos, k in enumerate(candidates):
        _, labels, _ = kmeans(pts, k, rng.derive(pos), restarts=restarts)
        size = max(k, int(lab.max()) + 1)
        acc = best_cluster_match(labels[idx], lab, size=size).matched_accuracy
        if acc > best_acc:
            best_acc = acc
            best_k = k
    return best_k
