"""Synthetic open-world SSL experiments end to end.

Gaussian-mixture data with seen/novel splits and class imbalance, a
linear-softmax model trained on the combined supervised + clustering +
confidence objective, a FIFO queue of recent prediction columns feeding the
self-label solver, and per-epoch bias/accuracy logging.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    PROB_FLOOR,
    ClassPrior,
    LabeledBlock,
    OwsslError,
    PartitionSpec,
    ProbMatrix,
    Rng,
    ShapeMismatch,
    softmax_columns,
)
from .evaluation import clustering_accuracy, manhattan_bias
from .objectives import (
    LossBreakdown,
    _colwise_cross_entropy,
    confidence_loss,
    total_loss,
)
from .sinkhorn import (
    SinkhornConfig,
    residual_row_marginals,
    solve_conditional,
    solve_unconditional,
)
from .threshold import PseudoBatch, ThresholdState, make_pseudo_batch, update_state


class InfeasibleSeparation(OwsslError):
    pass


class EpochOutOfRange(OwsslError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    """Gaussian-mixture benchmark settings (cluster noise has unit variance)."""

    k_total: int
    feature_dim: int
    samples_per_class: int
    imbalance_factor: float = 1.0
    novel_ratio: float = 0.5
    label_ratio: float = 0.5
    cluster_separation: float = 8.0
    weak_noise_sigma: float = 0.1
    strong_noise_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.k_total < 2:
            raise ValueError("need at least two classes")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be positive")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        if self.imbalance_factor < 1:
            raise ValueError("imbalance_factor must be >= 1")
        if round(self.samples_per_class / self.imbalance_factor) < 1:
            raise ValueError("imbalance_factor too large for samples_per_class")
        if not (0 < self.novel_ratio < 1):
            raise ValueError("novel_ratio must lie in (0, 1)")
        if not (0 < self.label_ratio <= 1):
            raise ValueError("label_ratio must lie in (0, 1]")
        if self.cluster_separation <= 0:
            raise ValueError("cluster_separation must be positive")
        if not (0 <= self.weak_noise_sigma <= self.strong_noise_sigma):
            raise ValueError("need 0 <= weak_noise_sigma <= strong_noise_sigma")
        n_seen = math.ceil((1.0 - self.novel_ratio) * self.k_total)
        if n_seen >= self.k_total:
            raise ValueError("novel_ratio leaves no novel classes")

    @property
    def n_seen(self) -> int:
        return math.ceil((1.0 - self.novel_ratio) * self.k_total)


@dataclass(frozen=True)
class SyntheticDataset:
    """Generated benchmark: labeled samples occupy the leading rows."""

    features: np.ndarray
    labels: np.ndarray
    partition: PartitionSpec
    labeled: LabeledBlock
    config: SyntheticConfig | None = None

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def class_sizes(cfg: SyntheticConfig) -> np.ndarray:
    """Per-class sample counts, geometric from the base count down by 1/IF."""
    k = cfg.k_total
    exponents = np.arange(k) / max(k - 1, 1)
    raw = cfg.samples_per_class * cfg.imbalance_factor ** (-exponents)
    return np.round(raw).astype(np.int64)


def _place_centroids(
    k: int, dim: int, separation: float, gen: np.random.Generator, budget: int = 50_000
) -> np.ndarray:
    side = separation * (k ** (1.0 / dim) + 1.0)
    for _ in range(30):
        centroids = np.empty((k, dim))
        placed = 0
        attempts = 0
        while placed < k and attempts < 2000:
            candidate = gen.uniform(-side / 2, side / 2, size=dim)
            attempts += 1
            budget -= 1
            if budget <= 0:
                raise InfeasibleSeparation(
                    f"cannot place {k} centroids at separation {separation} in {dim} dims"
                )
            gaps = np.sqrt(np.square(centroids[:placed] - candidate).sum(axis=1))
            if placed == 0 or gaps.min() >= separation:
                centroids[placed] = candidate
                placed += 1
        if placed == k:
            return centroids
        side *= 1.3
    raise InfeasibleSeparation(
        f"cannot place {k} centroids at separation {separation} in {dim} dims"
    )


def generate_dataset(cfg: SyntheticConfig) -> SyntheticDataset:
    """Sample the mixture, split seen/novel classes, and label the seen portion.

    The first ceil((1-novel_ratio)*K) classes are seen; label_ratio of each
    seen class is labeled. Labeled samples come first, the unlabeled pool
    (rest of seen plus all novel) is shuffled behind them.
    """
    rng = Rng(cfg.seed)
    gen = rng.derive(0).generator()
    sizes = class_sizes(cfg)
    centroids = _place_centroids(cfg.k_total, cfg.feature_dim, cfg.cluster_separation, gen)

    feats, labs = [], []
    for c in range(cfg.k_total):
        feats.append(centroids[c] + gen.standard_normal((sizes[c], cfg.feature_dim)))
        labs.append(np.full(sizes[c], c, dtype=np.int64))
    features = np.concatenate(feats)
    labels = np.concatenate(labs)

    n_seen = cfg.n_seen
    seen = tuple(range(n_seen))
    novel = tuple(range(n_seen, cfg.k_total))

    labeled_mask = np.zeros(labels.size, dtype=bool)
    offset = 0
    for c in range(cfg.k_total):
        if c < n_seen:
            n_lab = int(round(cfg.label_ratio * sizes[c]))
            labeled_mask[offset : offset + n_lab] = True
        offset += sizes[c]

    lab_idx = np.flatnonzero(labeled_mask)
    unlab_idx = np.flatnonzero(~labeled_mask)
    unlab_idx = gen.permutation(unlab_idx)
    order = np.concatenate([lab_idx, unlab_idx])
    features = features[order]
    labels = labels[order]

    n_labeled = lab_idx.size
    n_unlabeled = unlab_idx.size
    partition = PartitionSpec(cfg.k_total, seen, novel, n_labeled, n_unlabeled)
    labeled = LabeledBlock(labels[:n_labeled], seen=seen)
    return SyntheticDataset(features, labels, partition, labeled, config=cfg)


def weak_view(x: np.ndarray, sigma: float, gen: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise at the weak magnitude (identity when sigma=0)."""
    return x + sigma * gen.standard_normal(x.shape)


def strong_view(x: np.ndarray, sigma: float, gen: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise at the strong magnitude."""
    return x + sigma * gen.standard_normal(x.shape)


def local_view(
    x: np.ndarray, sigma: float, mask_fraction: float, gen: np.random.Generator
) -> np.ndarray:
    """Strong noise plus random zero-masking of a fraction of coordinates."""
    noisy = x + sigma * gen.standard_normal(x.shape)
    keep = gen.random(x.shape) >= mask_fraction
    return noisy * keep


@dataclass
class ToyModel:
    """Linear-softmax classifier: predictions are softmax(W x/s + b) per column.

    `input_scale` standardizes raw features to unit-ish magnitude so the
    logit scale is set by the weights, not by the feature geometry.
    """

    weights: np.ndarray
    bias: np.ndarray
    input_scale: float = 1.0

    @classmethod
    def zeros(cls, k: int, dim: int, input_scale: float = 1.0) -> "ToyModel":
        return cls(np.zeros((k, dim)), np.zeros(k), input_scale)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return self.weights @ (x / self.input_scale).T + self.bias[:, None]

    def predict(self, x: np.ndarray) -> ProbMatrix:
        return ProbMatrix(softmax_columns(self.logits(x)))


class LogitQueue:
    """FIFO buffer of recent prediction columns with labeled/unlabeled tags."""

    def __init__(self, capacity: int = 1024):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._cols: deque[np.ndarray] = deque(maxlen=capacity)
        self._tags: deque[int] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._cols)

    def push(self, probs: np.ndarray, tags: np.ndarray) -> None:
        probs = np.asarray(probs, dtype=np.float64)
        tags = np.asarray(tags, dtype=np.int64)
        if probs.ndim != 2 or probs.shape[1] != tags.size:
            raise ShapeMismatch("probs must be K x B with one tag per column")
        for j in range(tags.size):
            self._cols.append(probs[:, j].copy())
            self._tags.append(int(tags[j]))

    def matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Stored columns in insertion order plus their tags (-1 = unlabeled)."""
        if not self._cols:
            raise ValueError("queue is empty")
        return np.column_stack(list(self._cols)), np.asarray(self._tags, dtype=np.int64)


@dataclass(frozen=True)
class HyperParams:
    """Training-loop settings for the synthetic harness."""

    learning_rate: float = 0.5
    epochs: int = 50
    batch_size: int = 256
    sinkhorn: SinkhornConfig = field(
        default_factory=lambda: SinkhornConfig.training(epsilon=0.5)
    )
    threshold_momentum: float = 0.9
    local_views: int = 4
    local_mask_fraction: float = 0.5
    prior_mode: str = "true"
    prior_momentum: float = 0.98
    queue_capacity: int = 1024
    conditional: bool = True
    confidence: bool = True
    threshold_policy: str = "hierarchical"
    static_threshold: float = 0.95
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    weight_decay: float = 0.02
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.prior_mode not in ("true", "adaptive"):
            raise ValueError("prior_mode must be 'true' or 'adaptive'")
        if self.threshold_policy not in ("hierarchical", "static", "adaptive-global"):
            raise ValueError("threshold_policy must be hierarchical, static, or adaptive-global")
        if self.local_views < 0:
            raise ValueError("local_views must be non-negative")
        if not (0 <= self.prior_momentum < 1):
            raise ValueError("prior_momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    losses: LossBreakdown
    acc_seen: float
    acc_novel: float
    acc_all: float
    b_m: float
    b_s: float
    b_gap: float
    prior_estimate: tuple[float, ...]
    threshold_snapshot: dict | None

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "loss_sup": self.losses.sup,
            "loss_cls": self.losses.cls,
            "loss_conf": self.losses.conf,
            "loss_total": self.losses.total,
            "retained_fraction": self.losses.retained_fraction,
            "acc_seen": self.acc_seen,
            "acc_novel": self.acc_novel,
            "acc_all": self.acc_all,
            "b_m": self.b_m,
            "b_s": self.b_s,
            "b_gap": self.b_gap,
            "prior_estimate": list(self.prior_estimate),
            "thresholds": self.threshold_snapshot,
        }


@dataclass
class RunLog:
    """One record per epoch, in epoch order."""

    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch != self.records[-1].epoch + 1:
            raise ValueError("epoch indices must be consecutive")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def to_dicts(self) -> list[dict]:
        return [r.to_dict() for r in self.records]


def estimate_prior_adaptive(
    current_prior: ClassPrior, preds: ProbMatrix, momentum: float
) -> ClassPrior:
    """EMA of the mean predicted distribution, renormalized."""
    if not (0 <= momentum < 1):
        raise ValueError("momentum must lie in [0, 1)")
    if preds.k != current_prior.k:
        raise ShapeMismatch(f"predictions have {preds.k} rows, prior has {current_prior.k}")
    batch_mean = preds.data.mean(axis=1)
    mixed = momentum * current_prior.probs + (1.0 - momentum) * batch_mean
    return ClassPrior.normalized(mixed)


def empirical_distribution(labels: np.ndarray, k: int) -> ClassPrior:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=k)
    return ClassPrior.normalized(counts.astype(np.float64))


def self_label_bias(
    truth_labels: np.ndarray,
    prior: ClassPrior,
    labeled: LabeledBlock | None = None,
) -> float:
    """Distance between the self-label class distribution and the ground truth.

    The assignment's column mean converges to its row-marginal budget, so the
    bias is computed from that limit directly: pinned labeled counts plus the
    clamped residual marginals for the conditional route, the bare prior for
    the unconditional route. The reference is the ground truth of the columns
    the assignment covers. This is the estimator-bias view of the assignment:
    the conditional route is unbiased when the prior matches the data, while
    the unconditional route keeps the full prior-vs-unlabeled gap.
    """
    truth_labels = np.asarray(truth_labels, dtype=np.int64)
    if labeled is None or labeled.n == 0:
        q_dist = prior
    else:
        counts = np.bincount(labeled.labels, minlength=prior.k)
        residual = residual_row_marginals(prior, counts, truth_labels.size)
        q_dist = ClassPrior.normalized(counts + residual)
    truth_dist = empirical_distribution(truth_labels, prior.k)
    return manhattan_bias(q_dist, truth_dist)


def _solve_queue(
    queue: LogitQueue, prior: ClassPrior, cfg: SinkhornConfig, conditional: bool
) -> np.ndarray:
    """Self-labels for the queue contents, returned in insertion order."""
    p_q, tags_q = queue.matrix()
    if not conditional:
        return solve_unconditional(ProbMatrix(p_q), prior, cfg).q.data
    order = np.argsort(tags_q < 0, kind="stable")  # labeled first, order preserved
    n_lab = int((tags_q >= 0).sum())
    block = LabeledBlock(tags_q[order[:n_lab]])
    assignment = solve_conditional(ProbMatrix(p_q[:, order]), prior, block, cfg)
    q = np.empty_like(assignment.q.data)
    q[:, order] = assignment.q.data
    return q


def train(dataset: SyntheticDataset, hyper: HyperParams,
          noise: tuple[float, float] | None = None) -> tuple[ToyModel, RunLog]:
    """Run the full training loop and log per-epoch metrics.

    `noise` overrides the (weak, strong) view sigmas; by default they come
    from the dataset's generation config, falling back to (0.1, 0.5).
    """
    part = dataset.partition
    k, dim, n = part.k_total, dataset.dim, dataset.n
    if hyper.queue_capacity < k:
        raise ValueError("queue capacity must be at least the class count")
    if noise is not None:
        sigma_weak, sigma_strong = noise
    elif dataset.config is not None:
        sigma_weak = dataset.config.weak_noise_sigma
        sigma_strong = dataset.config.strong_noise_sigma
    else:
        sigma_weak, sigma_strong = 0.1, 0.5

    rng = Rng(hyper.seed)
    gen_batch = rng.derive(1).generator()
    gen_noise = rng.derive(2).generator()

    scale = float(np.sqrt(np.square(dataset.features).mean())) or 1.0
    # symmetry breaking: distinct novel heads must start distinct, or tied
    # argmaxes funnel every novel sample onto one head
    gen_init = rng.derive(0).generator()
    model = ToyModel(
        weights=hyper.init_scale * gen_init.standard_normal((k, dim)) / math.sqrt(dim),
        bias=np.zeros(k),
        input_scale=scale,
    )
    truth_dist = empirical_distribution(dataset.labels, k)
    prior = truth_dist if hyper.prior_mode == "true" else ClassPrior.uniform(k)

    if hyper.threshold_policy == "adaptive-global":
        # one group holding every class: the scheme collapses to a single
        # global status scaled by per-class ratios
        flat = PartitionSpec(k, tuple(range(k)), (), part.n_labeled, part.n_unlabeled)
        state = ThresholdState.initial(flat, hyper.threshold_momentum)
    else:
        state = ThresholdState.initial(part, hyper.threshold_momentum)

    queue = LogitQueue(hyper.queue_capacity)
    log = RunLog()
    w_sup, w_cls, w_conf = hyper.loss_weights

    n_batches = math.ceil(n / hyper.batch_size)
    total_steps = max(hyper.epochs * n_batches, 1)
    step = 0

    for epoch in range(1, hyper.epochs + 1):
        perm = gen_batch.permutation(n)
        sums = {"sup": 0.0, "cls": 0.0, "conf": 0.0, "retained": 0.0}
        for start in range(0, n, hyper.batch_size):
            batch = perm[start : start + hyper.batch_size]
            b = batch.size
            x = dataset.features[batch]
            is_lab = batch < part.n_labeled
            tags = np.where(is_lab, dataset.labels[batch], -1)

            xw = weak_view(x, sigma_weak, gen_noise)
            logits_w = model.logits(xw)
            probs_w = softmax_columns(logits_w)
            grad_w = np.zeros_like(probs_w)
            d_weights = np.zeros_like(model.weights)
            d_bias = np.zeros_like(model.bias)

            # supervised term on the labeled part of the batch
            sup = 0.0
            lab_pos = np.flatnonzero(is_lab)
            if lab_pos.size:
                y = dataset.labels[batch[lab_pos]]
                picked = probs_w[y, lab_pos]
                sup = float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())
                g = probs_w[:, lab_pos].copy()
                g[y, np.arange(lab_pos.size)] -= 1.0
                grad_w[:, lab_pos] += w_sup * g / lab_pos.size

            # clustering term against queue-derived self-labels
            cov = np.arange(b) if hyper.conditional else np.flatnonzero(~is_lab)
            cls = 0.0
            if cov.size:
                if hyper.conditional:
                    queue.push(probs_w, tags)
                else:
                    queue.push(probs_w[:, cov], tags[cov])
                q_all = _solve_queue(queue, prior, hyper.sinkhorn, hyper.conditional)
                q_batch = q_all[:, -cov.size :]
                denom = (hyper.local_views + 1) * cov.size
                cls_total = float(_colwise_cross_entropy(q_batch, probs_w[:, cov]).sum())
                grad_w[:, cov] += w_cls * (probs_w[:, cov] - q_batch) / denom
                for _ in range(hyper.local_views):
                    xl = local_view(
                        x[cov], sigma_strong, hyper.local_mask_fraction, gen_noise
                    )
                    probs_l = softmax_columns(model.logits(xl))
                    cls_total += float(_colwise_cross_entropy(q_batch, probs_l).sum())
                    g_l = w_cls * (probs_l - q_batch) / denom
                    d_weights += g_l @ (xl / scale)
                    d_bias += g_l.sum(axis=1)
                cls = cls_total / denom

            # confidence term on strong views of the whole batch
            conf = 0.0
            retained = 0.0
            if hyper.confidence:
                pm_w = ProbMatrix(probs_w)
                if hyper.threshold_policy == "static":
                    confs = probs_w.max(axis=0)
                    plabels = probs_w.argmax(axis=0)
                    pseudo = PseudoBatch(
                        confs > hyper.static_threshold, plabels, confs
                    )
                else:
                    state = update_state(state, pm_w)
                    pseudo = make_pseudo_batch(state, pm_w)
                retained = pseudo.retained_fraction
                if pseudo.mask.any():
                    xs = strong_view(x, sigma_strong, gen_noise)
                    probs_s = softmax_columns(model.logits(xs))
                    conf = confidence_loss(pseudo, ProbMatrix(probs_s))
                    g_s = probs_s.copy()
                    g_s[pseudo.labels, np.arange(b)] -= 1.0
                    g_s *= w_conf * pseudo.mask / b
                    d_weights += g_s @ (xs / scale)
                    d_bias += g_s.sum(axis=1)

            d_weights += grad_w @ (xw / scale)
            d_bias += grad_w.sum(axis=1)
            d_weights += hyper.weight_decay * model.weights
            lr = hyper.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
            model.weights -= lr * d_weights
            model.bias -= lr * d_bias
            step += 1

            sums["sup"] += sup
            sums["cls"] += cls
            sums["conf"] += conf
            sums["retained"] += retained

        # epoch metrics on clean features
        probs_full = model.predict(dataset.features)
        pred_hard = probs_full.data.argmax(axis=0)
        pred_dist = empirical_distribution(pred_hard, k)
        b_m = manhattan_bias(pred_dist, truth_dist)
        if hyper.conditional:
            b_s = self_label_bias(dataset.labels, prior, dataset.labeled)
        else:
            b_s = self_label_bias(dataset.labels[part.n_labeled :], prior, None)

        losses = total_loss(
            sums["sup"] / n_batches,
            sums["cls"] / n_batches,
            sums["conf"] / n_batches,
            retained_fraction=sums["retained"] / n_batches,
        )
        log.append(
            EpochRecord(
                epoch=epoch,
                losses=losses,
                acc_seen=clustering_accuracy(pred_hard, dataset.labels, "seen", part),
                acc_novel=clustering_accuracy(pred_hard, dataset.labels, "novel", part),
                acc_all=clustering_accuracy(pred_hard, dataset.labels, "all", part),
                b_m=b_m,
                b_s=b_s,
                b_gap=abs(b_m - b_s),
                prior_estimate=tuple(float(p) for p in prior.probs),
                threshold_snapshot=(
                    state.to_dict() if hyper.confidence and hyper.threshold_policy != "static" else None
                ),
            )
        )

        if hyper.prior_mode == "adaptive":
            prior = estimate_prior_adaptive(prior, probs_full, hyper.prior_momentum)

    return model, log


def run_bias_trajectory(
    dataset: SyntheticDataset, hyper: HyperParams, at_epochs: Sequence[int] | None = None
) -> list[tuple[int, float, float, float]]:
    """Rows of (epoch, model bias, self-label bias, absolute gap)."""
    _, log = train(dataset, hyper)
    by_epoch = {r.epoch: r for r in log.records}
    epochs = list(at_epochs) if at_epochs is not None else sorted(by_epoch)
    rows = []
    for e in epochs:
        if e not in by_epoch:
            raise EpochOutOfRange(f"epoch {e} not in the run log (1..{len(log)})")
        r = by_epoch[e]
        rows.append((e, r.b_m, r.b_s, r.b_gap))
    return rows
