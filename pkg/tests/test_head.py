import math

import numpy as np
import pytest

from vlcabs.errors import ConfigError, DimensionMismatch
from vlcabs.head import HeadParams, flatten, head_forward, init_head, unflatten


def _reference_forward(head, X):
    """Scalar-loop float64 reference for one token matrix (single head)."""
    X = [list(map(float, r)) for r in X]
    p = {k: np.asarray(v, dtype=np.float64) for k, v in head.params.items()}

    def ln(row, g, b):
        mu = sum(row) / len(row)
        var = sum((x - mu) ** 2 for x in row) / len(row)
        return [(x - mu) / math.sqrt(var + 1e-5) * g[i] + b[i] for i, x in enumerate(row)]

    def affine(row, w, b):
        return [sum(row[i] * w[i, j] for i in range(len(row))) + b[j] for j in range(w.shape[1])]

    def gelu(x):
        return 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))

    for k in range(head.layers):
        q = f"l{k}."
        z = [ln(r, p[q + "ln1.g"], p[q + "ln1.b"]) for r in X]
        Q = [affine(r, p[q + "attn.wq"], p[q + "attn.bq"]) for r in z]
        K = [affine(r, p[q + "attn.wk"], p[q + "attn.bk"]) for r in z]
        V = [affine(r, p[q + "attn.wv"], p[q + "attn.bv"]) for r in z]
        D = len(Q[0])
        H = []
        for i in range(len(X)):
            s = [sum(a * b for a, b in zip(Q[i], K[j])) / math.sqrt(D) for j in range(len(X))]
            m = max(s)
            e = [math.exp(x - m) for x in s]
            a = [x / sum(e) for x in e]
            o = [sum(a[j] * V[j][d] for j in range(len(X))) for d in range(D)]
            H.append([x + y for x, y in zip(X[i], affine(o, p[q + "attn.wo"], p[q + "attn.bo"]))])
        out = []
        for h in H:
            u = ln(h, p[q + "ln2.g"], p[q + "ln2.b"])
            g = [gelu(x) for x in affine(u, p[q + "mlp.w1"], p[q + "mlp.b1"])]
            out.append([x + y for x, y in zip(h, affine(g, p[q + "mlp.w2"], p[q + "mlp.b2"]))])
        X = out
    return np.array(X)


class TestShapes:
    def test_linear_forces_one_layer(self):
        head = init_head("linear", 8, layers=5)
        assert head.layers == 1
        assert set(head.params) == {"w", "b"}

    def test_transformer_shapes(self):
        head = init_head("transformer", 8, layers=2, mlp_ratio=4)
        head.check()
        assert head.params["l1.mlp.w1"].shape == (8, 32)
        assert head.params["l0.attn.wq"].dtype == np.float32

    def test_errors(self):
        with pytest.raises(ConfigError):
            HeadParams("conv")
        with pytest.raises(ConfigError):
            HeadParams("transformer", hidden_dim=10, heads=3)
        with pytest.raises(DimensionMismatch):
            head_forward(init_head("linear", 8), np.zeros((5, 6)))

    def test_check_catches_bad_shape(self):
        head = init_head("linear", 4)
        head.params["w"] = np.zeros((4, 3))
        with pytest.raises(DimensionMismatch):
            head.check()

    def test_flatten_roundtrip(self):
        head = init_head("transformer", 4, mlp_ratio=2)
        vec = flatten(head.params)
        assert vec.size == head.num_params()
        back = unflatten(vec, head.params)
        for k in head.params:
            np.testing.assert_array_equal(back[k], head.params[k])


class TestForward:
    def test_linear_identity(self, rng):
        X = rng.normal(size=(5, 8)).astype(np.float32)
        np.testing.assert_array_equal(head_forward(init_head("linear", 8), X), X)

    def test_transformer_zeroed_is_identity(self, rng):
        X = rng.normal(size=(5, 8))
        head = init_head("transformer", 8, init="identity")
        np.testing.assert_array_equal(head_forward(head, X), X)

    def test_random_init_near_identity(self, rng):
        X = rng.normal(size=(10, 16))
        Y = head_forward(init_head("transformer", 16, rng=rng), X)
        assert np.linalg.norm(Y - X) < 0.1 * np.linalg.norm(X)

    def test_matches_reference(self, rng):
        head = init_head("transformer", 6, layers=2, mlp_ratio=2, rng=rng)
        head.params = {k: v + rng.normal(0, 0.2, v.shape).astype(np.float32) for k, v in head.params.items()}
        X = rng.normal(size=(5, 6)).astype(np.float32)
        np.testing.assert_allclose(head_forward(head, X), _reference_forward(head, X), atol=1e-5)

    def test_batched_equals_single(self, rng):
        head = init_head("transformer", 8, mlp_ratio=2, rng=rng)
        X = rng.normal(size=(3, 5, 8))
        Y = head_forward(head, X)
        for b in range(3):
            np.testing.assert_allclose(Y[b], head_forward(head, X[b]), atol=1e-12)

    def test_permutation_equivariance(self, rng):
        head = init_head("transformer", 8, heads=2, mlp_ratio=2, rng=rng)
        X = rng.normal(size=(10, 8))
        perm = np.concatenate([[0], 1 + rng.permutation(9)])
        np.testing.assert_allclose(head_forward(head, X[perm]), head_forward(head, X)[perm], atol=1e-12)
