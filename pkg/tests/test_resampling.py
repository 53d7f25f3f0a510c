"""Supersample construction, U splits, permutations, gap and the permutation-prior oracle."""
import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from vqgb.diffcore import MlpSpec
from vqgb.model import ModelParams
from vqgb.quantizer import Codebook
from vqgb.resampling import (GapResult, PermutationSplit, Supersample, estimate_gap, gap_details,
                             make_supersample, permutation_prior_bruteforce, sample_permutation,
                             sample_u, split_by_u)


def sorted_rows(a):
    a = np.asarray(a).reshape(-1, np.asarray(a).shape[-1])
    return a[np.lexsort(a.T[::-1])]


def constant_model(c, d=2):
    """K=1 model whose decoder outputs ``c`` for every input."""
    enc = MlpSpec((d, 1))
    dec = MlpSpec((1, d))
    theta = np.concatenate([np.zeros(d), c])
    return ModelParams(enc, np.zeros(enc.n_params), dec, theta, Codebook(np.zeros((1, 1))))


class TestSupersample:
    """Pairing of 2n points into n rows."""

    def test_two_points(self):
        ss = make_supersample(np.array([[0.1], [0.9]]), 0)
        assert ss.n == 1
        np.testing.assert_array_equal(np.sort(ss.pairs.ravel()), [0.1, 0.9])

    def test_conservation_and_determinism(self):
        pts = np.random.default_rng(0).random((10, 3))
        a, b = make_supersample(pts, 5), make_supersample(pts, 5)
        np.testing.assert_array_equal(a.pairs, b.pairs)
        np.testing.assert_array_equal(sorted_rows(a.flat()), sorted_rows(pts))

    def test_odd_count(self):
        with pytest.raises(ValueError):
            make_supersample(np.zeros((3, 1)), 0)

    def test_unboxed(self):
        with pytest.raises(ValueError):
            Supersample(np.full((2, 2, 1), 2.0))


class TestSplit:
    """Selection of train and test halves by U."""

    def test_all_zero(self):
        ss = make_supersample(np.random.default_rng(1).random((8, 2)), 1)
        train, test = split_by_u(ss, np.zeros(4, dtype=int))
        np.testing.assert_array_equal(train, ss.pairs[:, 0])
        np.testing.assert_array_equal(test, ss.pairs[:, 1])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 10_000))
    def test_involution_and_conservation(self, n, seed):
        rng = np.random.default_rng(seed)
        ss = make_supersample(rng.random((2 * n, 2)), rng)
        u = sample_u(n, rng)
        tr, te = split_by_u(ss, u)
        tr2, te2 = split_by_u(ss, 1 - u)
        np.testing.assert_array_equal(tr, te2)
        np.testing.assert_array_equal(te, tr2)
        np.testing.assert_array_equal(sorted_rows(np.vstack([tr, te])), sorted_rows(ss.flat()))

    def test_bad_u(self):
        ss = make_supersample(np.zeros((4, 1)), 0)
        with pytest.raises(ValueError):
            split_by_u(ss, [0, 2])
        with pytest.raises(ValueError):
            split_by_u(ss, [0])


class TestPermutation:
    """Uniform permutation splits."""

    def test_two_uniform(self):
        rng = np.random.default_rng(2)
        first = np.array([sample_permutation(2, rng).perm[0] for _ in range(20_000)])
        p = first.mean()
        assert abs(p - 0.5) <= 3 * math.sqrt(0.25 / first.size)

    def test_four_uniform(self):
        rng = np.random.default_rng(3)
        draws = rng.permuted(np.tile(np.arange(4), (240_000, 1)), axis=1)
        keys = Counter(map(tuple, draws))
        # sample_permutation delegates to Generator.permutation; check both agree in law
        ours = Counter(tuple(sample_permutation(4, rng).perm) for _ in range(24_000))
        assert len(keys) == 24 and len(ours) == 24
        assert stats.chisquare([ours[p] for p in itertools.permutations(range(4))]).pvalue > 1e-3

    def test_bijection_and_halves(self):
        ps = sample_permutation(6, 4)
        np.testing.assert_array_equal(np.sort(ps.perm), np.arange(6))
        pts = np.arange(6)[:, None] * 0.1
        tr, te = ps.split(pts)
        np.testing.assert_array_equal(np.sort(np.concatenate([tr, te]).ravel()), pts.ravel())
        with pytest.raises(ValueError):
            PermutationSplit(np.array([0, 0, 1, 2]))


class TestGap:
    """Generalization gap on supersample splits."""

    def test_duplicated_columns(self):
        pts = np.random.default_rng(5).random((6, 2))
        ss = Supersample(np.stack([pts, pts], axis=1))
        assert estimate_gap(constant_model(np.array([0.5, 0.5])), ss, sample_u(6, 0)) == 0.0

    def test_constant_decoder_closed_form(self):
        rng = np.random.default_rng(6)
        ss = make_supersample(rng.random((20, 2)), rng)
        u = sample_u(10, rng)
        c = np.array([0.3, 0.7])
        tr, te = split_by_u(ss, u)
        expected = abs(((te - c) ** 2).sum(1).mean() - ((tr - c) ** 2).sum(1).mean())
        np.testing.assert_allclose(estimate_gap(constant_model(c), ss, u), expected, rtol=1e-12)

    def test_order_invariance(self):
        rng = np.random.default_rng(7)
        ss = make_supersample(rng.random((16, 2)), rng)
        u = sample_u(8, rng)
        perm = rng.permutation(8)
        model = constant_model(np.array([0.1, 0.2]))
        np.testing.assert_allclose(estimate_gap(model, Supersample(ss.pairs[perm]), u[perm]),
                                   estimate_gap(model, ss, u), rtol=1e-12)

    def test_signed(self):
        g = GapResult(0.2, 0.5)
        assert g.signed == pytest.approx(0.3) and g.gap == pytest.approx(0.3)
        assert GapResult(0.5, 0.2).gap == pytest.approx(0.3)

    def test_fresh_test_points(self):
        rng = np.random.default_rng(8)
        ss = make_supersample(rng.random((8, 2)), rng)
        u = sample_u(4, rng)
        c = np.array([0.5, 0.5])
        fresh = rng.random((50, 2))
        g = gap_details(constant_model(c), ss, u, test_points=fresh)
        np.testing.assert_allclose(g.test_loss, ((fresh - c) ** 2).sum(1).mean())


class TestPermutationPrior:
    """Brute-force average of the product posterior over all permutations."""

    def test_quarter_mixture(self):
        q = np.random.default_rng(9).dirichlet(np.ones(3), size=4)
        prior = permutation_prior_bruteforce(None, point_posteriors=q)
        for s in range(4):
            np.testing.assert_allclose(prior.slot_marginals[s], q.mean(0), atol=1e-15)
        assert prior.max_slot_tv <= 1e-12

    def test_identical_points(self):
        row = np.array([0.6, 0.3, 0.1])
        prior = permutation_prior_bruteforce(None, point_posteriors=np.tile(row, (4, 1)),
                                             joint=True)
        np.testing.assert_allclose(prior.slot_marginals, np.tile(row, (4, 1)), atol=1e-15)
        np.testing.assert_allclose(prior.joint.sum(), 1.0, atol=1e-12)

    def test_joint_marginals_consistent(self):
        q = np.random.default_rng(10).dirichlet(np.ones(2), size=4)
        prior = permutation_prior_bruteforce(None, point_posteriors=q, joint=True)
        np.testing.assert_allclose(prior.joint.sum(axis=(1, 2, 3)), prior.slot_marginals[0],
                                   atol=1e-14)

    def test_with_model(self):
        model = constant_model(np.array([0.2, 0.2]))
        prior = permutation_prior_bruteforce(np.random.default_rng(0).random((4, 2)), model)
        np.testing.assert_allclose(prior.slot_marginals, 1.0)

    def test_size_limit(self):
        with pytest.raises(ValueError):
            permutation_prior_bruteforce(None, point_posteriors=np.full((10, 2), 0.5))
