"""Contrastive objectives and their gradients.

The logit table has one row per image and one column per sentence; column
``c`` belongs to image ``owners[c]``.

* image side (multi-positive): every positive ``(i, c)`` is contrasted
  against all sentences of the other images in row ``i``;
* text side: every sentence column is contrasted against the other images
  in column ``c``.

Both are averaged over the ``N_T`` sentences. Gradients are derived by hand
through head, text projection, cross-attention and temperature.
"""
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass

import numpy as np

from . import head as head_mod
from .cabs import Temperature, backward_image, forward_image
from .errors import DimensionMismatch, NumericError


@dataclass
class LossBreakdown:
    l_i: float
    l_t: float
    total: float


@dataclass
class GradientSet:
    d_head: dict
    d_text: dict
    d_sentence_embeddings: np.ndarray  # w.r.t. the raw (unprojected) sentence rows
    d_tau: float

    @property
    def d_head_params(self):
        return head_mod.flatten(self.d_head)


@dataclass
class Model:
    """Everything trainable: image head, optional text projection, temperature."""

    head: head_mod.HeadParams
    temp: Temperature
    text: dict = None  # {"w": (D, D), "b": (D,)} or None
    similarity: str = "cosine"

    def project_text(self, E):
        E = np.asarray(E, dtype=np.float64)
        if self.text is None:
            return E
        return E @ np.asarray(self.text["w"], dtype=np.float64) + np.asarray(self.text["b"], dtype=np.float64)

    def image_tokens(self, tokens):
        return head_mod.head_forward(self.head, tokens)


def init_text_projection(dim):
    return {"w": np.eye(dim, dtype=np.float32), "b": np.zeros(dim, dtype=np.float32)}


def _owners(batch_or_owners):
    owners = getattr(batch_or_owners, "owners", batch_or_owners)
    return np.asarray(owners, dtype=np.intp)


def _check(logits, owners):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or logits.shape[1] != owners.shape[0]:
        raise DimensionMismatch(f"logit table {logits.shape} vs {owners.shape[0]} sentences")
    if owners.size and owners.max() >= logits.shape[0]:
        raise DimensionMismatch("sentence owner outside the image rows")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    return logits


def _lse(x):
    if x.size == 0:
        return -np.inf
    m = x.max()
    return m + np.log(np.sum(np.exp(x - m)))


def mpnce_terms(logits, owners):
    """Image-side loss and its gradient with respect to the logit table."""
    owners = _owners(owners)
    logits = _check(logits, owners)
    n_t = owners.shape[0]
    grad = np.zeros_like(logits)
    loss = 0.0
    for i in range(logits.shape[0]):
        pos = np.flatnonzero(owners == i)
        if pos.size == 0:
            continue
        neg = np.flatnonzero(owners != i)
        neg_lse = _lse(logits[i, neg])
        lp = logits[i, pos]
        lse = np.logaddexp(lp, neg_lse)
        loss += np.sum(lse - lp)
        grad[i, pos] += np.exp(lp - lse) - 1.0
        if neg.size:
            grad[i, neg] += np.exp(logits[i, neg][None, :] - lse[:, None]).sum(axis=0)
    return loss / n_t, grad / n_t


def infonce_terms(logits, owners):
    """Text-side loss and its gradient with respect to the logit table."""
    owners = _owners(owners)
    logits = _check(logits, owners)
    n_t = owners.shape[0]
    cols = np.arange(n_t)
    m = logits.max(axis=0)
    z = np.exp(logits - m)
    lse = m + np.log(z.sum(axis=0))
    loss = np.sum(lse - logits[owners, cols])
    grad = z / z.sum(axis=0)
    grad[owners, cols] -= 1.0
    return loss / n_t, grad / n_t


def mpnce_loss(logits, batch):
    return float(mpnce_terms(logits, batch)[0])


def infonce_loss(logits, batch):
    return float(infonce_terms(logits, batch)[0])


def _stacks(batch):
    tokens = batch.token_stack()
    if len({t.shape for t in tokens}) == 1:
        return [np.stack(tokens)]
    return [t[None] for t in tokens]


def model_forward(batch, model):
    """Logit table plus everything the reverse pass needs."""
    scale = model.temp.scale
    groups = []
    for X in _stacks(batch):
        V, hcache = head_mod.forward(model.head, np.asarray(X, dtype=np.float64))
        groups.append((X, V, hcache))
    E = batch.sentence_matrix().astype(np.float64)
    T = model.project_text(E)
    rows, caches = [], []
    for _, V, _ in groups:
        for Vi in V:
            row, cache = forward_image(Vi, T, scale, model.similarity)
            rows.append(row)
            caches.append(cache)
    return np.stack(rows), dict(groups=groups, E=E, T=T, caches=caches, scale=scale)


def loss_only(batch, model):
    logits, _ = model_forward(batch, model)
    l_i, _ = mpnce_terms(logits, batch.owners)
    l_t, _ = infonce_terms(logits, batch.owners)
    return LossBreakdown(float(l_i), float(l_t), float(l_i + l_t))


def total_loss_and_grads(batch, model, threads=1, deterministic=True):
    """Combined loss and analytic gradients for every trainable parameter.

    With ``threads > 1`` the per-image reverse passes run in a pool; when
    ``deterministic`` is false their contributions are summed in completion
    order.
    """
    logits, fw = model_forward(batch, model)
    l_i, g_i = mpnce_terms(logits, batch.owners)
    l_t, g_t = infonce_terms(logits, batch.owners)
    if not np.isfinite(l_i + l_t):
        raise NumericError("loss is not finite")
    dlogits = g_i + g_t
    caches = fw["caches"]

    def one(i):
        return i, backward_image(dlogits[i], caches[i])

    dV_rows = [None] * len(caches)
    dT = np.zeros_like(fw["T"])
    d_scale = 0.0
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(one, i) for i in range(len(caches))]
            results = [f.result() for f in futures] if deterministic else [f.result() for f in as_completed(futures)]
    else:
        results = [one(i) for i in range(len(caches))]
    for i, (dV, dTi, ds) in results:
        dV_rows[i] = dV
        dT += dTi
        d_scale += ds

    d_head = None
    start = 0
    for X, V, hcache in fw["groups"]:
        dV = np.stack(dV_rows[start:start + V.shape[0]])
        start += V.shape[0]
        _, g = head_mod.backward(model.head, dV, hcache)
        d_head = g if d_head is None else {k: d_head[k] + g[k] for k in g}

    d_text = None
    dE = dT
    if model.text is not None:
        d_text = {"w": fw["E"].T @ dT, "b": dT.sum(axis=0)}
        dE = dT @ np.asarray(model.text["w"], dtype=np.float64).T
    grads = GradientSet(d_head=d_head, d_text=d_text, d_sentence_embeddings=dE,
                        d_tau=d_scale * fw["scale"])
    return LossBreakdown(float(l_i), float(l_t), float(l_i + l_t)), grads
