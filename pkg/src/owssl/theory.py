"""Statistical analysis of the two self-label class-distribution estimators.

Populations are multinomial: N_labeled draws from the labeled prior and
N_unlabeled draws from the unlabeled prior, with the overall prior derived
from the mixture identity N*p = Nl*pl + Nu*pu. The unconditional estimator
is the constant overall prior; the conditional estimator subtracts the
observed labeled counts from the overall budget. Reliability is measured by
the expectation of the chi-square statistic (ECS) of the implied unlabeled
counts against their true expectation - closed forms here, Monte Carlo
verification in `monte_carlo_ecs`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import ClassPrior, OwsslError, Rng, ShapeMismatch


class NonPositiveExpected(OwsslError):
    pass


class CountMismatch(OwsslError):
    pass


class ZeroUnlabeledMass(OwsslError):
    pass


@dataclass(frozen=True)
class PopulationSpec:
    """Multinomial population: labeled/unlabeled priors and sample counts.

    The overall prior is always derived from the mixture identity, never
    supplied, so the consistency invariant holds by construction.
    """

    prior_labeled: ClassPrior
    prior_unlabeled: ClassPrior
    n_labeled: int
    n_unlabeled: int
    prior: ClassPrior = field(init=False)

    def __post_init__(self):
        if self.prior_labeled.k != self.prior_unlabeled.k:
            raise ShapeMismatch("labeled and unlabeled priors must share K")
        if self.n_labeled < 0:
            raise ValueError("n_labeled must be non-negative")
        if self.n_unlabeled < 1:
            raise ValueError("n_unlabeled must be at least 1")
        pl = self.prior_labeled.probs
        pu = self.prior_unlabeled.probs
        if self.n_labeled == 0 or np.array_equal(pl, pu):
            # mixture equals the unlabeled prior exactly; skip the arithmetic
            # so matching-prior specs stay bitwise exact
            mixed = pu.copy()
        else:
            n = self.n_labeled + self.n_unlabeled
            mixed = (self.n_labeled * pl + self.n_unlabeled * pu) / n
        object.__setattr__(self, "prior", ClassPrior(mixed))

    @property
    def k(self) -> int:
        return self.prior_labeled.k

    @property
    def n_total(self) -> int:
        return self.n_labeled + self.n_unlabeled


@dataclass(frozen=True)
class EcsReport:
    """Closed-form and empirical ECS values plus bias diagnostics."""

    ecs_uncon_closed: float
    ecs_con_closed: float
    ecs_uncon_empirical: float
    ecs_uncon_se: float
    ecs_con_empirical: float
    ecs_con_se: float
    bias_uncon: np.ndarray  # overall prior minus unlabeled prior, exact
    bias_con: np.ndarray    # Monte Carlo mean of the conditional estimator minus truth
    bias_con_se: np.ndarray
    ordering_condition: bool
    trials: int

    def to_dict(self) -> dict:
        return {
            "ecs_uncon_closed": self.ecs_uncon_closed,
            "ecs_con_closed": self.ecs_con_closed,
            "ecs_uncon_empirical": self.ecs_uncon_empirical,
            "ecs_uncon_se": self.ecs_uncon_se,
            "ecs_con_empirical": self.ecs_con_empirical,
            "ecs_con_se": self.ecs_con_se,
            "bias_uncon": [float(b) for b in self.bias_uncon],
            "bias_con": [float(b) for b in self.bias_con],
            "bias_con_se": [float(b) for b in self.bias_con_se],
            "ordering_condition": self.ordering_condition,
            "trials": self.trials,
        }


def sample_multinomial(n: int, probs: ClassPrior, rng: Rng) -> np.ndarray:
    """Draw class counts summing to n with the given class probabilities."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return np.zeros(probs.k, dtype=np.int64)
    return rng.generator().multinomial(n, probs.probs).astype(np.int64)


def chi_square_statistic(observed, expected) -> float:
    """Sum of (observed - expected)^2 / expected over all classes."""
    obs = np.asarray(observed, dtype=np.float64)
    exp = np.asarray(expected, dtype=np.float64)
    if obs.shape != exp.shape:
        raise ShapeMismatch(f"observed shape {obs.shape} != expected shape {exp.shape}")
    if np.any(exp <= 0):
        raise NonPositiveExpected("expected counts must be strictly positive")
    return float((np.square(obs - exp) / exp).sum())


def estimator_uncon(spec: PopulationSpec) -> tuple[np.ndarray, np.ndarray]:
    """Constant estimate: implied counts Nu * prior and distribution = prior."""
    a = spec.n_unlabeled * spec.prior.probs
    return a, spec.prior.probs.copy()


def estimator_con(spec: PopulationSpec, labeled_counts) -> tuple[np.ndarray, np.ndarray]:
    """Counts N * prior minus the observed labeled counts; may go negative.

    The raw linear estimator is reported unclamped - the distribution
    estimate is its scaling by 1/Nu, negative components included.
    """
    counts = np.asarray(labeled_counts)
    if counts.shape != (spec.k,):
        raise ShapeMismatch(f"labeled_counts shape {counts.shape} does not match K={spec.k}")
    if int(counts.sum()) != spec.n_labeled:
        raise CountMismatch(
            f"labeled counts sum to {int(counts.sum())}, expected {spec.n_labeled}"
        )
    a = spec.n_total * spec.prior.probs - counts
    return a, a / spec.n_unlabeled


def ecs_uncon_closed(spec: PopulationSpec) -> float:
    """Closed-form ECS of the constant estimator: sum Nu (p - pu)^2 / pu."""
    p = spec.prior.probs
    pu = spec.prior_unlabeled.probs
    diff = p - pu
    dead = pu <= 0
    if np.any(dead & (diff != 0)):
        raise ZeroUnlabeledMass("prior deviates on a class with zero unlabeled mass")
    live = ~dead
    return float((spec.n_unlabeled * np.square(diff[live]) / pu[live]).sum())


def ecs_con_closed(spec: PopulationSpec) -> float:
    """Closed-form ECS of the count-subtraction estimator: sum Nl pl (1-pl) / (Nu pu)."""
    pl = spec.prior_labeled.probs
    pu = spec.prior_unlabeled.probs
    var = spec.n_labeled * pl * (1.0 - pl)
    dead = pu <= 0
    if np.any(dead & (var > 0)):
        raise ZeroUnlabeledMass("labeled variance on a class with zero unlabeled mass")
    live = ~dead
    return float((var[live] / (spec.n_unlabeled * pu[live])).sum())


def ecs_ordering_condition(spec: PopulationSpec) -> bool:
    """Sufficient condition for the conditional ECS to be the smaller one.

    With r_i = Nl*pl_i/N and r = sum r_i, requires BOTH
    sqrt(Nu) * |r_i - r*pu_i| > 1 for every labeled class i AND
    sqrt(Nu) * r*p_j > 1 for every class j present in the unlabeled data.
    False whenever Nl = 0 (the reciprocal diverges).

    Reading the quantifier as "for every (i, j) pair, the max beats the
    threshold" would only require one of the two clauses, which admits
    orderings the bound does not cover (labeled classes certify only their
    own deviation terms); the conjunction is the conservative reading that
    the per-class deviation argument actually needs.
    """
    if spec.n_labeled == 0:
        return False
    pl = spec.prior_labeled.probs
    pu = spec.prior_unlabeled.probs
    p = spec.prior.probs
    r_i = spec.n_labeled * pl / spec.n_total
    r = r_i.sum()
    labeled_set = pl > 0
    unlabeled_set = pu > 0
    if not labeled_set.any():
        return False
    a = np.abs(r_i - r * pu)[labeled_set]
    b = (r * p)[unlabeled_set]
    root = math.sqrt(spec.n_unlabeled)
    return root * float(a.min()) > 1.0 and root * float(b.min()) > 1.0


def monte_carlo_ecs(
    spec: PopulationSpec, trials: int, rng: Rng, chunk_size: int = 20_000
) -> EcsReport:
    """Monte Carlo check of unbiasedness and of the closed-form ECS values.

    Each trial draws labeled counts from the labeled prior, forms both
    estimators, and scores their implied unlabeled counts against the true
    expectation Nu * pu. Trials are split into fixed chunks, each on its own
    derived random stream, so results do not depend on execution order.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    closed_uncon = ecs_uncon_closed(spec)
    closed_con = ecs_con_closed(spec)

    pu = spec.prior_unlabeled.probs
    live = pu > 0
    expected_u = spec.n_unlabeled * pu[live]
    budget = spec.n_total * spec.prior.probs

    chi_sum = 0.0
    chi_sq_sum = 0.0
    mu_sum = np.zeros(spec.k)
    mu_sq_sum = np.zeros(spec.k)

    done = 0
    chunk_index = 0
    while done < trials:
        m = min(chunk_size, trials - done)
        gen = rng.derive(chunk_index).generator()
        if spec.n_labeled == 0:
            counts = np.zeros((m, spec.k))
        else:
            counts = gen.multinomial(spec.n_labeled, spec.prior_labeled.probs, size=m)
        a_con = budget[None, :] - counts
        chi = (np.square(a_con[:, live] - expected_u[None, :]) / expected_u[None, :]).sum(axis=1)
        mu = a_con / spec.n_unlabeled
        chi_sum += float(chi.sum())
        chi_sq_sum += float(np.square(chi).sum())
        mu_sum += mu.sum(axis=0)
        mu_sq_sum += np.square(mu).sum(axis=0)
        done += m
        chunk_index += 1

    def _mean_se(total: float, total_sq: float, count: int) -> tuple[float, float]:
        mean = total / count
        if count < 2:
            return mean, 0.0
        var = max((total_sq - count * mean * mean) / (count - 1), 0.0)
        return mean, math.sqrt(var / count)

    ecs_con_emp, ecs_con_se = _mean_se(chi_sum, chi_sq_sum, trials)
    mu_mean = mu_sum / trials
    if trials > 1:
        mu_var = np.maximum((mu_sq_sum - trials * np.square(mu_mean)) / (trials - 1), 0.0)
        mu_se = np.sqrt(mu_var / trials)
    else:
        mu_se = np.zeros(spec.k)

    # the unconditional estimate is a constant vector: its chi-square is
    # deterministic, equal to the closed form, with zero standard error
    a_uncon, _ = estimator_uncon(spec)
    ecs_uncon_emp = float(
        (np.square(a_uncon[live] - expected_u) / expected_u).sum()
    )

    return EcsReport(
        ecs_uncon_closed=closed_uncon,
        ecs_con_closed=closed_con,
        ecs_uncon_empirical=ecs_uncon_emp,
        ecs_uncon_se=0.0,
        ecs_con_empirical=ecs_con_emp,
        ecs_con_se=ecs_con_se,
        bias_uncon=spec.prior.probs - pu,
        bias_con=mu_mean - pu,
        bias_con_se=mu_se,
        ordering_condition=ecs_ordering_condition(spec),
        trials=trials,
    )
