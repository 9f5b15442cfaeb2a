"""Similarity-based cross-attention between patch and sentence embeddings.

For an image with token embeddings ``v_0 .. v_L`` (``v_0`` is CLS) and a
sentence embedding ``t``::

    s_k = cos(v_k, t) * exp(tau)                 k = 0..L
    a   = softmax(s)                              over k
    w   = sum_k a_k v_k                           raw, un-normalized rows
    l   = cos(w, t) * exp(tau)

and the patch-level map is ``s_1 .. s_L``. There are no learned projections
inside the attention; scores are bounded by ``exp(tau)``.

The batched path (:func:`forward_image` / :func:`backward_image`) evaluates
all sentences against one image at once and carries the hand-derived
reverse pass used by the objective.
"""
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, ZeroNorm
from .store import PatchEmbeddingSet, SentenceEmbedding
from .tensor import EPS, l2_normalize, stable_softmax

TAU_INIT = math.log(1 / 0.07)
MAX_SCALE = 100.0


@dataclass
class Temperature:
    """Learnable log-scale ``tau``; the similarity scale is ``exp(tau)``."""

    tau: float = TAU_INIT
    max_scale: float = MAX_SCALE

    @property
    def scale(self):
        return math.exp(self.tau)

    def clamped(self):
        return Temperature(min(self.tau, math.log(self.max_scale)), self.max_scale)


@dataclass
class PatchSimilarityMap:
    scores: np.ndarray  # (L,), CLS excluded
    grid_side: int

    def grid(self):
        return self.scores.reshape(self.grid_side, self.grid_side)


def _tokens(image):
    if isinstance(image, PatchEmbeddingSet):
        return image.tokens
    return np.asarray(image)


def _vector(sentence):
    if isinstance(sentence, SentenceEmbedding):
        return sentence.embedding
    return np.asarray(sentence).ravel()


def _scale(temp):
    return temp.scale if isinstance(temp, Temperature) else math.exp(float(temp))


def _norms(x):
    r = np.sqrt(np.sum(x * x, axis=-1))
    if np.any(r <= EPS):
        raise ZeroNorm("zero-norm embedding")
    return r


def patch_scores(image, sentence, temp, similarity="cosine"):
    """Scores ``s_k`` for ``k = 0..L`` (CLS first), float64."""
    v = _tokens(image).astype(np.float64)
    t = _vector(sentence).astype(np.float64)
    if v.shape[1] != t.shape[0]:
        raise DimensionMismatch(f"image dim {v.shape[1]} != sentence dim {t.shape[0]}")
    if similarity == "dot":
        return v @ t / math.sqrt(t.shape[0])
    vb = v / _norms(v)[:, None]
    tb = t / _norms(t)
    return (vb @ tb) * _scale(temp)


def attention_weights(scores):
    return stable_softmax(np.asarray(scores, dtype=np.float64))


def attended_embedding(weights, image):
    v = _tokens(image).astype(np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[0] != v.shape[0]:
        raise DimensionMismatch(f"{weights.shape[0]} weights for {v.shape[0]} tokens")
    w = weights @ v
    return l2_normalize(w)


def global_logit(attended, sentence, temp):
    w = l2_normalize(np.asarray(attended, dtype=np.float64))
    t = l2_normalize(_vector(sentence).astype(np.float64))
    return float(np.dot(w, t) * _scale(temp))


def similarity_map(scores):
    scores = np.asarray(scores)
    n = scores.shape[0] - 1
    side = math.isqrt(n)
    if side * side != n:
        raise DimensionMismatch(f"{n} patch scores do not form a square grid")
    return PatchSimilarityMap(scores[1:].copy(), side)


def pair_logit(image, sentence, temp, similarity="cosine"):
    """Full per-pair path: scores -> weights -> attended -> logit."""
    s = patch_scores(image, sentence, temp, similarity)
    w = attended_embedding(attention_weights(s), image)
    return global_logit(w, sentence, temp)


def forward_image(tokens, sents, scale, similarity="cosine"):
    """Logits of every sentence row in ``sents`` against one image.

    Returns ``(logits, cache)``; inputs are promoted to float64.
    """
    V = np.asarray(tokens, dtype=np.float64)
    T = np.asarray(sents, dtype=np.float64)
    if V.shape[1] != T.shape[1]:
        raise DimensionMismatch(f"image dim {V.shape[1]} != sentence dim {T.shape[1]}")
    rV, rT = _norms(V), _norms(T)
    Vb, Tb = V / rV[:, None], T / rT[:, None]
    C = Vb @ Tb.T
    S = scale * C if similarity == "cosine" else (V @ T.T) / math.sqrt(V.shape[1])
    A = np.exp(S - S.max(axis=0))
    A /= A.sum(axis=0)
    W = A.T @ V
    rW = _norms(W)
    Wb = W / rW[:, None]
    G = np.sum(Wb * Tb, axis=1)
    cache = dict(V=V, T=T, rV=rV, rT=rT, Vb=Vb, Tb=Tb, C=C, S=S, A=A, rW=rW, Wb=Wb, G=G,
                 scale=scale, similarity=similarity)
    return scale * G, cache


def backward_image(dl, cache):
    """Reverse pass of :func:`forward_image`: ``(dV, dT, d_scale)``."""
    V, T, A = cache["V"], cache["T"], cache["A"]
    Vb, Tb, Wb = cache["Vb"], cache["Tb"], cache["Wb"]
    e = cache["scale"]
    dl = np.asarray(dl, dtype=np.float64)
    # l = e * <Wb, Tb>
    d_scale = float(np.dot(cache["G"], dl))
    dG = e * dl
    dWb = dG[:, None] * Tb
    dTb = dG[:, None] * Wb
    dW = (dWb - np.sum(dWb * Wb, axis=1)[:, None] * Wb) / cache["rW"][:, None]
    # W = A^T V
    dA = V @ dW.T
    dV = A @ dW
    # softmax over tokens (axis 0)
    dS = A * (dA - np.sum(A * dA, axis=0))
    if cache["similarity"] == "cosine":
        d_scale += float(np.sum(dS * cache["C"]))
        dC = e * dS
        dVb = dC @ Tb
        dTb += dC.T @ Vb
        dV += (dVb - np.sum(dVb * Vb, axis=1)[:, None] * Vb) / cache["rV"][:, None]
        dT = np.zeros_like(T)
    else:
        k = 1.0 / math.sqrt(V.shape[1])
        dV += k * (dS @ T)
        dT = k * (dS.T @ V)
    dT += (dTb - np.sum(dTb * Tb, axis=1)[:, None] * Tb) / cache["rT"][:, None]
    return dV, dT, d_scale


def logit_matrix(batch, temp, batched=True, similarity="cosine", tokens=None, sents=None):
    """``B x N_T`` logit table; column order follows ``batch.sentences``.

    ``batched=False`` evaluates every entry through :func:`pair_logit`.
    ``tokens``/``sents`` override the raw embeddings (e.g. head outputs).
    """
    tokens = batch.token_stack() if tokens is None else tokens
    sents = batch.sentence_matrix() if sents is None else sents
    scale = _scale(temp)
    out = np.empty((len(tokens), len(sents)), dtype=np.float64)
    for i, V in enumerate(tokens):
        if batched:
            out[i], _ = forward_image(V, sents, scale, similarity)
        else:
            for c, t in enumerate(sents):
                out[i, c] = pair_logit(V, t, temp, similarity)
    return out
