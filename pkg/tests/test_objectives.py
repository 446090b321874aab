import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owssl.core import ShapeMismatch, softmax, validate_prob_matrix
from owssl.objectives import (
    NonFiniteComponent,
    ce_logit_gradient,
    clustering_loss,
    clustering_loss_multiview,
    confidence_loss,
    cross_entropy,
    supervised_loss,
    total_loss,
)
from owssl.sinkhorn import Assignment
from owssl.threshold import PseudoBatch

from oracles import central_difference_gradient

LOG2 = math.log(2.0)
LOG4 = math.log(4.0)


def as_assignment(matrix) -> Assignment:
    q = validate_prob_matrix(matrix)
    return Assignment(q, 0.0, 0.0, 0, True)


class TestCrossEntropy:
    def test_perfect_one_hot(self):
        assert cross_entropy([1.0, 0.0], [1.0, 0.0]) == 0.0

    def test_one_hot_vs_uniform(self):
        assert cross_entropy([1, 0, 0, 0], [0.25] * 4) == pytest.approx(LOG4, abs=1e-12)

    def test_self_entropy_uniform_pair(self):
        assert cross_entropy([0.5, 0.5], [0.5, 0.5]) == pytest.approx(LOG2, abs=1e-12)

    def test_floor_prevents_infinity(self):
        value = cross_entropy([1.0, 0.0], [0.0, 1.0])
        assert np.isfinite(value)
        assert value == pytest.approx(-math.log(1e-12))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            cross_entropy([1.0, 0.0], [1.0, 0.0, 0.0])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 10_000))
    def test_gibbs_inequality(self, k, seed):
        rng = np.random.default_rng(seed)
        t = rng.dirichlet(np.ones(k))
        p = rng.dirichlet(np.ones(k))
        entropy = cross_entropy(t, t)
        assert cross_entropy(t, p) >= entropy - 1e-12


class TestSupervisedLoss:
    def test_one_hot_correct(self):
        preds = validate_prob_matrix([[1.0, 0.0], [0.0, 1.0]])
        assert supervised_loss(np.array([0, 1]), preds) == 0.0

    def test_empty_convention(self):
        preds = validate_prob_matrix([[1.0], [0.0]])
        assert supervised_loss(np.empty(0, dtype=int), preds) == 0.0

    def test_mean_of_two_terms(self):
        p0 = math.exp(-0.2)
        p1 = math.exp(-0.4)
        preds = validate_prob_matrix([[p0, p1], [1 - p0, 1 - p1]])
        assert supervised_loss(np.array([0, 0]), preds) == pytest.approx(0.3, abs=1e-12)


class TestClusteringLoss:
    def test_one_hot_agreement(self):
        q = as_assignment([[1.0, 0.0], [0.0, 1.0]])
        preds = validate_prob_matrix([[1.0, 0.0], [0.0, 1.0]])
        assert clustering_loss(q, preds) == 0.0

    def test_soft_agreement_gives_mean_entropy(self):
        cols = np.array([[0.3, 0.7], [0.6, 0.4]]).T
        q = as_assignment(cols)
        preds = validate_prob_matrix(cols)
        expected = np.mean(
            [-(c * np.log(c)).sum() for c in cols.T]
        )
        assert clustering_loss(q, preds) == pytest.approx(expected, abs=1e-12)

    def test_one_hot_vs_uniform(self):
        q = as_assignment([[1.0, 0.0], [0.0, 1.0]])
        preds = validate_prob_matrix(np.full((2, 2), 0.5))
        assert clustering_loss(q, preds) == pytest.approx(LOG2, abs=1e-12)


class TestMultiview:
    def test_no_views_reduces_bitwise(self):
        rng = np.random.default_rng(0)
        q = as_assignment(rng.dirichlet(np.ones(3), size=5).T)
        preds = validate_prob_matrix(rng.dirichlet(np.ones(3), size=5).T)
        assert clustering_loss_multiview(q, preds, []) == clustering_loss(q, preds)

    def test_identical_views_change_nothing(self):
        rng = np.random.default_rng(1)
        q = as_assignment(rng.dirichlet(np.ones(3), size=4).T)
        preds = validate_prob_matrix(rng.dirichlet(np.ones(3), size=4).T)
        value = clustering_loss_multiview(q, preds, [preds, preds, preds])
        assert value == pytest.approx(clustering_loss(q, preds), abs=1e-12)

    def test_two_term_average(self):
        # one sample: global term 0.2, local term 0.6 -> (0.2 + 0.6) / 2
        q = as_assignment([[1.0], [0.0]])
        g = math.exp(-0.2)
        l = math.exp(-0.6)
        global_preds = validate_prob_matrix([[g], [1 - g]])
        local_preds = validate_prob_matrix([[l], [1 - l]])
        value = clustering_loss_multiview(q, global_preds, [local_preds])
        assert value == pytest.approx(0.4, abs=1e-12)


class TestConfidenceLoss:
    def test_all_rejected(self):
        pseudo = PseudoBatch(np.array([False, False]), np.array([0, 1]), np.array([0.9, 0.9]))
        preds = validate_prob_matrix(np.full((2, 2), 0.5))
        assert confidence_loss(pseudo, preds) == 0.0

    def test_perfect_strong_prediction(self):
        pseudo = PseudoBatch(np.array([True, False]), np.array([0, 1]), np.array([0.9, 0.5]))
        preds = validate_prob_matrix([[1.0, 0.5], [0.0, 0.5]])
        assert confidence_loss(pseudo, preds) == 0.0

    def test_normalizes_by_total_count(self):
        pseudo = PseudoBatch(np.array([True, False]), np.array([0, 1]), np.array([0.9, 0.5]))
        preds = validate_prob_matrix(np.full((2, 2), 0.5))
        assert confidence_loss(pseudo, preds) == pytest.approx(LOG2 / 2, abs=1e-12)

    def test_monotone_in_threshold(self):
        # removing retained samples can only lower the loss
        rng = np.random.default_rng(2)
        preds = validate_prob_matrix(rng.dirichlet(np.ones(3), size=6).T)
        labels = preds.data.argmax(axis=0)
        conf = preds.data.max(axis=0)
        order = np.argsort(conf)
        last = np.inf
        for keep in range(6, -1, -1):
            mask = np.zeros(6, dtype=bool)
            mask[order[6 - keep :]] = True if keep else False
            value = confidence_loss(PseudoBatch(mask, labels, conf), preds)
            assert value <= last + 1e-12
            last = value


class TestTotalLoss:
    def test_zero(self):
        assert total_loss(0.0, 0.0, 0.0).total == 0.0

    def test_sum(self):
        out = total_loss(0.3, 0.5, 0.2, retained_fraction=0.75)
        assert out.total == pytest.approx(1.0, abs=1e-15)
        assert out.total == out.sup + out.cls + out.conf
        assert out.retained_fraction == 0.75

    def test_single_term(self):
        assert total_loss(1.0, 0.0, 0.0).total == 1.0

    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteComponent):
            total_loss(np.nan, 0.0, 0.0)

    def test_weight_hook(self):
        out = total_loss(1.0, 2.0, 3.0, weights=(0.5, 1.0, 0.0))
        assert out.total == pytest.approx(2.5)


class TestCeLogitGradient:
    def test_stationary_at_matching_softmax(self):
        logits = np.array([0.3, -0.2, 1.1])
        target = softmax(logits)
        np.testing.assert_allclose(ce_logit_gradient(target, logits), 0.0, atol=1e-15)

    def test_one_hot_symmetric_pair(self):
        grad = ce_logit_gradient([1.0, 0.0], [0.0, 0.0])
        np.testing.assert_allclose(grad, [-0.5, 0.5], atol=1e-15)

    def test_matches_central_differences(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            target = rng.dirichlet(np.ones(5))
            logits = rng.normal(size=5)

            def loss(z):
                return cross_entropy(target, softmax(z))

            grad = ce_logit_gradient(target, logits)
            reference = central_difference_gradient(loss, logits, h=1e-5)
            np.testing.assert_allclose(grad, reference, atol=1e-6)
