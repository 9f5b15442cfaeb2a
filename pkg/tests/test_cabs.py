import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_batch
from oracles import softmax64
from vlcabs.cabs import (TAU_INIT, Temperature, attended_embedding, attention_weights, backward_image,
                         forward_image, global_logit, logit_matrix, pair_logit, patch_scores,
                         similarity_map)
from vlcabs.errors import DimensionMismatch, ZeroNorm
from vlcabs.store import PatchEmbeddingSet
from vlcabs.synthetic import oracle_logit

seeds = st.integers(0, 2 ** 31 - 1)


def _image(rng, L=4, D=6):
    return PatchEmbeddingSet("x", rng.normal(size=(L + 1, D)).astype(np.float32))


class TestPatchScores:
    def test_identical_vectors_unit_scale(self):
        e1 = np.eye(3, dtype=np.float32)[0]
        s = patch_scores(np.tile(e1, (5, 1)), e1, Temperature(0.0))
        np.testing.assert_allclose(s, 1.0, atol=1e-12)

    def test_initial_temperature(self):
        e1 = np.eye(3)[0]
        s = patch_scores(np.tile(e1, (2, 1)), e1, Temperature())
        np.testing.assert_allclose(s, 1 / 0.07, rtol=1e-12)
        assert abs(1 / 0.07 - 14.2857) < 1e-4

    def test_orthogonal(self):
        s = patch_scores(np.array([[1.0, 0], [0, 2.0]]), np.array([0, 1.0]), Temperature())
        assert s[0] == 0.0

    def test_errors(self):
        with pytest.raises(DimensionMismatch):
            patch_scores(np.ones((2, 3)), np.ones(4), Temperature())
        with pytest.raises(ZeroNorm):
            patch_scores(np.array([[0.0, 0.0], [1.0, 0.0]]), np.ones(2), Temperature())


class TestAttention:
    def test_equal_scores(self):
        np.testing.assert_allclose(attention_weights([3.0, 3.0]), [0.5, 0.5])

    def test_dominant(self):
        w = attention_weights([10.0, -10.0, -10.0])
        np.testing.assert_allclose(w, softmax64([10, -10, -10]), atol=1e-15)
        assert abs(w[0] - 1.0) <= 1e-6

    def test_shift(self, rng):
        s = rng.normal(size=9)
        np.testing.assert_allclose(attention_weights(s + 7.5), attention_weights(s), atol=1e-6)


class TestAttended:
    def test_identical_rows(self):
        u = np.array([1.0, 2.0, 2.0])
        out = attended_embedding(np.full(4, 0.25), np.tile(u, (4, 1)))
        np.testing.assert_allclose(out, u / 3.0, atol=1e-12)

    def test_selection(self, rng):
        v = rng.normal(size=(5, 4))
        w = np.zeros(5)
        w[3] = 1.0
        np.testing.assert_allclose(attended_embedding(w, v), v[3] / np.linalg.norm(v[3]), atol=1e-12)

    def test_reference_weighted_sum(self, rng):
        v = rng.normal(size=(6, 5))
        w = softmax64(rng.normal(size=6))
        ref = [sum(w[k] * v[k, d] for k in range(6)) for d in range(5)]
        n = math.sqrt(sum(x * x for x in ref))
        np.testing.assert_allclose(attended_embedding(w, v), [x / n for x in ref], atol=1e-12)

    def test_cancellation_raises(self):
        v = np.array([[1.0, 0.0], [-1.0, 0.0]])
        with pytest.raises(ZeroNorm):
            attended_embedding([0.5, 0.5], v)


class TestGlobalLogit:
    def test_aligned(self):
        assert global_logit(np.array([0, 3.0]), np.array([0, 1.0]), Temperature(0.0)) == 1.0

    def test_orthogonal(self):
        assert global_logit(np.array([1.0, 0]), np.array([0, 1.0]), Temperature()) == 0.0

    def test_composed_vs_oracle(self, rng):
        for _ in range(5):
            v = rng.normal(size=(5, 8))
            t = rng.normal(size=8)
            tau = rng.uniform(0, TAU_INIT)
            assert abs(pair_logit(v, t, Temperature(tau)) - oracle_logit(v, t, math.exp(tau))) <= 1e-5


class TestMap:
    def test_drops_cls(self):
        m = similarity_map([9.0, 1, 2, 3, 4])
        np.testing.assert_array_equal(m.scores, [1, 2, 3, 4])
        assert m.grid_side == 2
        np.testing.assert_array_equal(m.grid(), [[1, 2], [3, 4]])

    def test_full_resolution_side(self):
        assert similarity_map(np.zeros(1370)).grid_side == 37

    def test_not_square(self):
        with pytest.raises(DimensionMismatch):
            similarity_map(np.zeros(4))


class TestLogitMatrix:
    def test_single_identical(self):
        e = np.eye(8)[1]
        b = make_batch(np.random.default_rng(0), (1,))
        b.images[0].tokens[:] = e
        b.sentences[0].embedding[:] = e
        np.testing.assert_allclose(logit_matrix(b, Temperature()), [[1 / 0.07]], rtol=1e-7)

    def test_orthogonal_blocks(self, rng):
        D = 8
        b = make_batch(rng, (2, 2), D=D)
        # image 0 and its sentences live in dims 0-3, image 1 in dims 4-7
        for i, img in enumerate(b.images):
            img.tokens[:, 4 * (1 - i):4 * (2 - i)] = 0.0
        for c, s in enumerate(b.sentences):
            owner = b.owners[c]
            s.embedding[4 * (1 - owner):4 * (2 - owner)] = 0.0
        lm = logit_matrix(b, Temperature())
        for i in range(2):
            for c in range(4):
                ref = oracle_logit(b.images[i].tokens, b.sentences[c].embedding, 1 / 0.07)
                assert abs(lm[i, c] - ref) <= 1e-5
                if b.owners[c] != i:
                    assert abs(lm[i, c]) <= 1e-6

    def test_per_pair_path_exact(self, rng):
        b = make_batch(rng, (2, 1, 3))
        temp = Temperature(1.3)
        slow = logit_matrix(b, temp, batched=False)
        for i, img in enumerate(b.images):
            for c, s in enumerate(b.sentences):
                assert slow[i, c] == pair_logit(img, s, temp)
        np.testing.assert_allclose(logit_matrix(b, temp), slow, atol=1e-5)


class TestInvariants:
    @settings(max_examples=50, deadline=None)
    @given(seeds, st.floats(0.01, 100.0), st.floats(0.01, 100.0))
    def test_scale_invariance(self, seed, a, b):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=(10, 6))
        t = rng.normal(size=6)
        temp = Temperature()
        base = patch_scores(v, t, temp)
        v2 = v.copy()
        v2[rng.integers(0, 10)] *= a
        np.testing.assert_allclose(patch_scores(v2, t * b, temp), base, atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(seeds, st.floats(-3.0, math.log(100.0)))
    def test_weights_and_bounds(self, seed, tau):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=(17, 6))
        t = rng.normal(size=6)
        temp = Temperature(tau)
        s = patch_scores(v, t, temp)
        w = attention_weights(s)
        assert abs(w.sum() - 1.0) <= 1e-6
        assert np.all(np.abs(s) <= temp.scale + 1e-5)
        assert abs(pair_logit(v, t, temp)) <= temp.scale + 1e-5

    @settings(max_examples=50, deadline=None)
    @given(seeds)
    def test_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        v = rng.normal(size=(10, 5))
        t = rng.normal(size=5)
        perm = rng.permutation(9)
        vp = np.vstack([v[:1], v[1:][perm]])
        temp = Temperature()
        m = similarity_map(patch_scores(v, t, temp)).scores
        mp = similarity_map(patch_scores(vp, t, temp)).scores
        np.testing.assert_allclose(mp, m[perm], atol=1e-6)
        assert abs(pair_logit(vp, t, temp) - pair_logit(v, t, temp)) <= 1e-6

    def test_cls_excluded_from_map_but_attended(self, rng):
        v = rng.normal(size=(5, 4))
        t = rng.normal(size=4)
        temp = Temperature()
        base_map = similarity_map(patch_scores(v, t, temp)).scores
        v2 = v.copy()
        v2[0] = t * 3.0  # CLS perfectly aligned
        s2 = patch_scores(v2, t, temp)
        np.testing.assert_array_equal(similarity_map(s2).scores, base_map)
        assert attention_weights(s2)[0] > attention_weights(patch_scores(v, t, temp))[0]
        assert pair_logit(v2, t, temp) != pair_logit(v, t, temp)


class TestBackward:
    @pytest.mark.parametrize("similarity", ["cosine", "dot"])
    def test_finite_differences(self, rng, similarity):
        V = rng.normal(size=(5, 4))
        T = rng.normal(size=(3, 4))
        scale = 5.0
        dl = rng.normal(size=3)

        def f(V, T, scale):
            return float(forward_image(V, T, scale, similarity)[0] @ dl)

        _, cache = forward_image(V, T, scale, similarity)
        dV, dT, ds = backward_image(dl, cache)
        h = 1e-6
        for arr, grad in ((V, dV), (T, dT)):
            for idx in np.ndindex(arr.shape):
                o = arr[idx]
                arr[idx] = o + h
                fp = f(V, T, scale)
                arr[idx] = o - h
                fm = f(V, T, scale)
                arr[idx] = o
                assert abs((fp - fm) / (2 * h) - grad[idx]) <= 1e-7
        assert abs((f(V, T, scale + h) - f(V, T, scale - h)) / (2 * h) - ds) <= 1e-7
