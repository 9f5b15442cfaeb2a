"""Trainable layers applied to frozen encoder tokens.

Two kinds:

* ``linear``: one row-wise affine map ``Y = X W + b``.
* ``transformer``: ``K`` pre-norm blocks, each
  ``h = x + Attn(LN(x))`` then ``y = h + MLP(LN(h))`` with a tanh-GELU MLP.
  No positional terms are added, so the block is equivariant to token
  permutations.

Forward passes accept a stack ``(B, n, D)`` of token matrices and run in
float64 regardless of parameter storage dtype. Each ``forward`` returns the
output plus a cache consumed by the matching ``backward``.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from .errors import ConfigError, DimensionMismatch

LN_EPS = 1e-5


@dataclass
class HeadParams:
    kind: str = "transformer"
    hidden_dim: int = 768
    layers: int = 2
    heads: int = 1
    mlp_ratio: int = 4
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("linear", "transformer"):
            raise ConfigError(f"unknown head kind {self.kind!r}")
        if self.hidden_dim % self.heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by heads {self.heads}")
        if self.kind == "linear":
            self.layers = 1

    def config(self):
        return dict(kind=self.kind, hidden_dim=self.hidden_dim, layers=self.layers,
                    heads=self.heads, mlp_ratio=self.mlp_ratio)

    def shapes(self):
        D, M = self.hidden_dim, self.hidden_dim * self.mlp_ratio
        if self.kind == "linear":
            return {"w": (D, D), "b": (D,)}
        out = {}
        for k in range(self.layers):
            p = f"l{k}."
            out.update({
                p + "ln1.g": (D,), p + "ln1.b": (D,),
                p + "attn.wq": (D, D), p + "attn.bq": (D,),
                p + "attn.wk": (D, D), p + "attn.bk": (D,),
                p + "attn.wv": (D, D), p + "attn.bv": (D,),
                p + "attn.wo": (D, D), p + "attn.bo": (D,),
                p + "ln2.g": (D,), p + "ln2.b": (D,),
                p + "mlp.w1": (D, M), p + "mlp.b1": (M,),
                p + "mlp.w2": (M, D), p + "mlp.b2": (D,),
            })
        return out

    def check(self):
        shapes = self.shapes()
        if set(shapes) != set(self.params):
            raise DimensionMismatch("head parameter names do not match head config")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise DimensionMismatch(f"{name}: shape {self.params[name].shape} != {shape}")

    def with_params(self, params):
        return HeadParams(**self.config(), params=params)

    def num_params(self):
        return sum(p.size for p in self.params.values())


def init_head(kind="transformer", hidden_dim=768, layers=2, heads=1, mlp_ratio=4,
              rng=None, init=None):
    """Create head parameters.

    ``init`` is ``"identity"`` (identity map) or ``"random"``. The default is
    identity for the linear kind and random for the transformer kind; random
    transformer blocks use small output projections so each residual block
    starts close to the identity.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    head = HeadParams(kind, hidden_dim, layers, heads, mlp_ratio)
    init = init or ("identity" if kind == "linear" else "random")
    if init not in ("identity", "random"):
        raise ConfigError(f"unknown init {init!r}")
    D = hidden_dim
    params = {}
    for name, shape in head.shapes().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif len(shape) == 1 or init == "identity":
            arr = np.eye(D) if (kind == "linear" and len(shape) == 2) else np.zeros(shape)
        elif kind == "linear":
            arr = rng.normal(0.0, 1.0 / math.sqrt(D), shape)
        elif leaf in ("wo", "w2"):
            arr = rng.normal(0.0, 0.02 / math.sqrt(2 * layers), shape)
        else:
            arr = rng.normal(0.0, math.sqrt(2.0 / (shape[0] + shape[1])), shape)
        params[name] = arr.astype(np.float32)
    head.params = params
    return head


def _stack(tokens):
    X = np.asarray(tokens, dtype=np.float64)
    return (X[None], True) if X.ndim == 2 else (X, False)


def _p(params, name):
    return np.asarray(params[name], dtype=np.float64)


def _ln_forward(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_backward(dy, cache):
    xhat, inv, g = cache
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    db = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True))
    return dx, dg, db


def _sum_rows(x):
    return x.reshape(-1, x.shape[-1]).sum(axis=0)


def _outer(a, b):
    # sum over batch and token axes of a^T b
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _split(x, heads):
    B, n, D = x.shape
    return x.reshape(B, n, heads, D // heads).transpose(0, 2, 1, 3)


def _merge(x):
    B, H, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, n, H * dh)


def _block_forward(x, params, p, heads):
    z, ln1 = _ln_forward(x, _p(params, p + "ln1.g"), _p(params, p + "ln1.b"))
    Q = z @ _p(params, p + "attn.wq") + _p(params, p + "attn.bq")
    K = z @ _p(params, p + "attn.wk") + _p(params, p + "attn.bk")
    Vv = z @ _p(params, p + "attn.wv") + _p(params, p + "attn.bv")
    Qh, Kh, Vh = _split(Q, heads), _split(K, heads), _split(Vv, heads)
    scale = 1.0 / math.sqrt(Qh.shape[-1])
    logits = Qh @ Kh.transpose(0, 1, 3, 2) * scale
    P = np.exp(logits - logits.max(axis=-1, keepdims=True))
    P /= P.sum(axis=-1, keepdims=True)
    O = _merge(P @ Vh)
    h = x + O @ _p(params, p + "attn.wo") + _p(params, p + "attn.bo")
    u, ln2 = _ln_forward(h, _p(params, p + "ln2.g"), _p(params, p + "ln2.b"))
    a = u @ _p(params, p + "mlp.w1") + _p(params, p + "mlp.b1")
    ga, dgelu = kernels.gelu(a)
    y = h + ga @ _p(params, p + "mlp.w2") + _p(params, p + "mlp.b2")
    cache = dict(z=z, ln1=ln1, Qh=Qh, Kh=Kh, Vh=Vh, P=P, O=O, scale=scale,
                 u=u, ln2=ln2, ga=ga, dgelu=dgelu)
    return y, cache


def _block_backward(dy, cache, params, p, heads, grads):
    # y = h + MLP(LN2(h))
    grads[p + "mlp.b2"] = _sum_rows(dy)
    grads[p + "mlp.w2"] = _outer(cache["ga"], dy)
    da = (dy @ _p(params, p + "mlp.w2").T) * cache["dgelu"]
    grads[p + "mlp.b1"] = _sum_rows(da)
    grads[p + "mlp.w1"] = _outer(cache["u"], da)
    du = da @ _p(params, p + "mlp.w1").T
    dh_ln, grads[p + "ln2.g"], grads[p + "ln2.b"] = _ln_backward(du, cache["ln2"])
    dh = dy + dh_ln
    # h = x + Attn(LN1(x))
    grads[p + "attn.bo"] = _sum_rows(dh)
    grads[p + "attn.wo"] = _outer(cache["O"], dh)
    dOh = _split(dh @ _p(params, p + "attn.wo").T, heads)
    P = cache["P"]
    dP = dOh @ cache["Vh"].transpose(0, 1, 3, 2)
    dVh = P.transpose(0, 1, 3, 2) @ dOh
    dlogits = P * (dP - np.sum(P * dP, axis=-1, keepdims=True)) * cache["scale"]
    dQ = _merge(dlogits @ cache["Kh"])
    dK = _merge(dlogits.transpose(0, 1, 3, 2) @ cache["Qh"])
    dV = _merge(dVh)
    z = cache["z"]
    dz = 0.0
    for leaf, d in (("q", dQ), ("k", dK), ("v", dV)):
        grads[p + f"attn.b{leaf}"] = _sum_rows(d)
        grads[p + f"attn.w{leaf}"] = _outer(z, d)
        dz = dz + d @ _p(params, p + f"attn.w{leaf}").T
    dx_ln, grads[p + "ln1.g"], grads[p + "ln1.b"] = _ln_backward(dz, cache["ln1"])
    return dh + dx_ln


def head_forward(head, tokens):
    """Apply the head to ``(n, D)`` or ``(B, n, D)`` tokens; returns float64."""
    X, single = _stack(tokens)
    if X.shape[-1] != head.hidden_dim:
        raise DimensionMismatch(f"token dim {X.shape[-1]} != hidden_dim {head.hidden_dim}")
    Y, _ = forward(head, X)
    return Y[0] if single else Y


def forward(head, X):
    params = head.params
    if head.kind == "linear":
        return X @ _p(params, "w") + _p(params, "b"), X
    caches = []
    for k in range(head.layers):
        X, cache = _block_forward(X, params, f"l{k}.", head.heads)
        caches.append(cache)
    return X, caches


def backward(head, dY, cache):
    """Gradients ``(dX, {name: grad})`` for a stacked forward."""
    params = head.params
    grads = {}
    if head.kind == "linear":
        grads["w"] = _outer(cache, dY)
        grads["b"] = _sum_rows(dY)
        return dY @ _p(params, "w").T, grads
    dX = dY
    for k in reversed(range(head.layers)):
        dX = _block_backward(dX, cache[k], params, f"l{k}.", head.heads, grads)
    return dX, {name: grads[name] for name in params}


def flatten(params):
    return np.concatenate([np.asarray(v, dtype=np.float64).ravel() for v in params.values()])


def unflatten(vector, like):
    out, i = {}, 0
    for name, arr in like.items():
        out[name] = vector[i:i + arr.size].reshape(arr.shape)
        i += arr.size
    return out
