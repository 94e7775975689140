import math

import numpy as np
import pytest

from intentbank.scoring import (
    _rank_from_scores,
    aggregate,
    rank_items,
    sampled_softmax_loss,
    score,
)


class TestAggregate:
    def test_single_intent(self):
        h = np.array([[1.0], [2.0], [3.0]])
        v = aggregate(h, np.array([0.3, -0.2, 0.5]))
        assert np.allclose(v, h[:, 0])

    def test_symmetric_softmax(self):
        h1 = np.array([1.0, 0.0])
        h2 = np.array([0.0, 1.0])
        e_a = np.array([1.0, 1.0])  # equal dots
        v = aggregate(np.stack([h1, h2], axis=1), e_a)
        assert np.allclose(v, (h1 + h2) / 2)

    def test_random_matches_direct_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            h = rng.normal(size=(6, 3))
            e_a = rng.normal(size=6)
            s = e_a @ h
            beta = np.exp(s) / np.exp(s).sum()
            want = h @ beta
            assert np.allclose(aggregate(h, e_a), want, atol=1e-12)

    def test_weights_positive_sum_one(self):
        rng = np.random.default_rng(1)
        h = rng.normal(size=(5, 4)) * 3
        e_a = rng.normal(size=5)
        v = aggregate(h, e_a)
        # v inside the convex hull: solve for the weights via lstsq
        beta, *_ = np.linalg.lstsq(h, v, rcond=None)
        assert abs(beta.sum() - 1.0) < 1e-9


class TestScore:
    def test_orthogonal(self):
        assert score(np.array([1.0, 0.0]), np.array([0.0, 5.0])) == 0.0

    def test_unit(self):
        v = np.array([1.0, 0.0])
        assert score(v, v) == 1.0

    def test_random_elementwise_oracle(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=8), rng.normal(size=8)
        assert abs(score(a, b) - sum(x * y for x, y in zip(a, b))) < 1e-12


class TestSampledSoftmax:
    def test_uniform_case(self):
        # all logits equal -> loss = ln(n+1)
        d, k, n = 4, 1, 7
        h = np.zeros((d, k))
        h[0, 0] = 1.0
        e_a = np.array([0.0, 1.0, 0.0, 0.0])  # v.e_a = 0
        negatives = np.tile(e_a, (n, 1))
        loss = sampled_softmax_loss(h, e_a, negatives)
        assert abs(loss - math.log(n + 1)) < 1e-12

    def test_dominant_target_goes_to_zero(self):
        h = np.array([[10.0], [0.0]])
        e_a = np.array([10.0, 0.0])
        negatives = np.array([[0.0, 1.0]])
        assert sampled_softmax_loss(h, e_a, negatives) < 1e-6

    def test_closed_form(self):
        # v.e_a = 1, one negative with v.e = 0 -> ln(1 + e^-1)
        h = np.array([[1.0], [0.0]])
        e_a = np.array([1.0, 0.0])
        negatives = np.array([[0.0, 1.0]])
        loss = sampled_softmax_loss(h, e_a, negatives)
        assert abs(loss - math.log(1 + math.exp(-1))) < 1e-12

    def test_positive_and_decreasing_in_target_logit(self):
        rng = np.random.default_rng(3)
        h = rng.normal(size=(4, 2))
        negatives = rng.normal(size=(5, 4))
        e_a = rng.normal(size=4)
        base = sampled_softmax_loss(h, e_a, negatives)
        assert base > 0
        # scaling target along v raises the target logit, loss must fall
        v = aggregate(h, e_a)
        better = sampled_softmax_loss(h, e_a + 0.5 * v, negatives)
        assert better < base


class TestRankItems:
    def test_single_intent_modes_agree(self):
        rng = np.random.default_rng(4)
        h = rng.normal(size=(6, 1))
        cand = rng.normal(size=(10, 6))
        att = rank_items(h, cand, "attentive", 10)
        mx = rank_items(h, cand, "max", 10)
        assert [i for i, _ in att] == [i for i, _ in mx]

    def test_planted_max_mode_winner(self):
        d = 4
        h = np.zeros((d, 2))
        h[0, 0] = 1.0
        h[1, 1] = 1.0
        cand = np.vstack([h[:, 0], np.eye(d)[2:], -np.eye(d)[3:]])
        ranked = rank_items(h, cand, "max", 1)
        assert ranked[0][0] == 0

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(5)
        h = rng.normal(size=(5, 3))
        cand = rng.normal(size=(20, 5))
        got = rank_items(h, cand, "attentive", 20)
        # independent: score each candidate with aggregate() + score(), then sort
        from intentbank.scoring import aggregate as agg, score as sc

        scores = [sc(agg(h, c), c) for c in cand]
        want = sorted(range(20), key=lambda j: (-scores[j], j))
        assert [i for i, _ in got] == want

    def test_shift_invariance(self):
        rng = np.random.default_rng(6)
        scores = rng.normal(size=30)
        ids = np.arange(30)
        base = [i for i, _ in _rank_from_scores(scores, ids, 30)]
        shifted = [i for i, _ in _rank_from_scores(scores + 7.5, ids, 30)]
        assert base == shifted

    def test_ties_broken_by_ascending_id(self):
        scores = np.array([1.0, 2.0, 2.0, 0.5])
        ids = np.array([9, 4, 2, 1])
        got = [i for i, _ in _rank_from_scores(scores, ids, 4)]
        assert got == [2, 4, 9, 1]

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        h = rng.normal(size=(4, 2))
        cand = rng.normal(size=(15, 4))
        assert rank_items(h, cand, "attentive", 5) == rank_items(h, cand, "attentive", 5)

    def test_n_too_large(self):
        with pytest.raises(ValueError):
            rank_items(np.ones((3, 1)), np.ones((4, 3)), "attentive", 5)
