"""AdamW with warmup + cosine schedule, gradient clipping, and the epoch loop.

Checkpoint layout (little-endian)::

    b"VLCK" | u16 version | u32 n | n bytes UTF-8 JSON config echo
    | u32 blocks | blocks x (u32 n | name | u32 rows | u32 cols | float32 payload)
"""
import copy
import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .cabs import MAX_SCALE, TAU_INIT, Temperature
from .errors import BadMagic, ConfigError, DataError, EmptyDataset, TruncatedFile, VersionUnsupported
from .head import HeadParams, init_head
from .objective import Model, init_text_projection, loss_only, total_loss_and_grads
from .store import _atomic_write, decode_matrix, encode_matrix, load_batch

log = logging.getLogger(__name__)

CKPT_MAGIC = b"VLCK"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    warmup_steps: int = 50
    total_epochs: int = 20
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    batch_size: int = 32
    patience: int = 5
    seed: int = 0
    precision: str = "float32"
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    max_steps: int = None
    decay_tau: bool = False
    head: str = "transformer"
    layers: int = 2
    heads: int = 1
    mlp_ratio: int = 4
    hidden_dim: int = 768
    tau_init: float = TAU_INIT
    max_scale: float = MAX_SCALE
    text_projection: bool = True
    similarity: str = "cosine"
    deterministic: bool = True
    threads: int = 1

    def __post_init__(self):
        self.betas = tuple(self.betas)
        for name in ("learning_rate", "total_epochs", "clip_norm", "batch_size", "patience"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.warmup_steps < 0 or self.weight_decay < 0:
            raise ConfigError("warmup_steps and weight_decay must be non-negative")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, not {self.precision!r}")
        if self.head not in ("linear", "transformer"):
            raise ConfigError(f"head must be linear or transformer, not {self.head!r}")
        if self.similarity not in ("cosine", "dot"):
            raise ConfigError(f"similarity must be cosine or dot, not {self.similarity!r}")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros(np.shape(p)) for k, p in params.items()},
                   {k: np.zeros(np.shape(p)) for k, p in params.items()})


def lr_at(step, config, total_steps):
    """Linear warmup to the base rate, then cosine decay to zero."""
    base, warm = config.learning_rate, config.warmup_steps
    if warm > 0 and step < warm:
        return base * step / warm
    span = max(1, total_steps - warm)
    progress = min(1.0, max(0.0, (step - warm) / span))
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def global_norm(grads):
    return math.sqrt(sum(float(np.sum(np.square(np.asarray(g, dtype=np.float64)))) for g in grads.values()))


def clip_gradients(grads, clip_norm):
    """Rescale so the global norm is at most ``clip_norm``; returns ``(grads, norm)``."""
    norm = global_norm(grads)
    if norm <= clip_norm or norm == 0.0:
        return grads, norm
    factor = clip_norm / norm
    return {k: np.asarray(g, dtype=np.float64) * factor for k, g in grads.items()}, norm


def optimizer_step(state, params, grads, config, step_index, total_steps=None):
    """One AdamW update; returns ``(new_params, lr)`` and advances ``state``.

    Weight decay is decoupled (applied to the parameter, not the moments)
    and skips ``tau`` unless ``config.decay_tau``.
    """
    total_steps = total_steps or max(step_index, config.warmup_steps + 1)
    lr = lr_at(step_index, config, total_steps)
    grads, _ = clip_gradients(grads, config.clip_norm)
    b1, b2 = config.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for name, p in params.items():
        dtype = np.asarray(p).dtype
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(grads[name], dtype=np.float64)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        if config.weight_decay and (name != "tau" or config.decay_tau):
            p = p - lr * config.weight_decay * p
        p = p - lr * (state.m[name] / c1) / (np.sqrt(state.v[name] / c2) + config.adam_eps)
        out[name] = p.astype(dtype)
    return out, lr


def model_params(model):
    """Flat name -> array view of every trainable parameter."""
    params = {f"head.{k}": v for k, v in model.head.params.items()}
    if model.text is not None:
        params.update({f"text.{k}": v for k, v in model.text.items()})
    params["tau"] = np.asarray(model.temp.tau, dtype=np.float64)
    return params


def grad_dict(grads):
    out = {f"head.{k}": v for k, v in grads.d_head.items()}
    if grads.d_text is not None:
        out.update({f"text.{k}": v for k, v in grads.d_text.items()})
    out["tau"] = np.asarray(grads.d_tau)
    return out


def apply_params(model, params):
    model.head.params = {k[5:]: v for k, v in params.items() if k.startswith("head.")}
    if model.text is not None:
        model.text = {k[5:]: v for k, v in params.items() if k.startswith("text.")}
    model.temp = Temperature(float(params["tau"]), model.temp.max_scale).clamped()


def build_model(config, dim, rng):
    if config.hidden_dim != dim:
        raise DataError(f"hidden_dim {config.hidden_dim} does not match embedding dim {dim}")
    dtype = np.float32 if config.precision == "float32" else np.float64
    head = init_head(config.head, dim, config.layers, config.heads, config.mlp_ratio, rng=rng)
    head.params = {k: v.astype(dtype) for k, v in head.params.items()}
    text = None
    if config.text_projection:
        text = {k: v.astype(dtype) for k, v in init_text_projection(dim).items()}
    return Model(head, Temperature(config.tau_init, config.max_scale), text, config.similarity)


@dataclass
class TrainResult:
    model: Model
    curve: list = field(default_factory=list)  # (step, l_i, l_t, total, lr)
    val_losses: list = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    steps: int = 0


def _batches(ids, size, rng):
    order = list(ids)
    rng.shuffle(order)
    return [order[i:i + size] for i in range(0, len(order), size)]


def evaluate_loss(manifest, ids, model, batch_size):
    """Mean total loss over fixed-order batches (sentence-weighted)."""
    ids = [i for i in ids if manifest.entry(i).sentence_ids]
    total, weight = 0.0, 0
    for start in range(0, len(ids), batch_size):
        batch = load_batch(manifest, ids[start:start + batch_size])
        total += loss_only(batch, model).total * batch.num_sentences
        weight += batch.num_sentences
    return total / weight if weight else 0.0


def train(manifest, config, train_ids, val_ids=(), model=None, on_epoch=None):
    """Train and return the checkpoint with the lowest validation loss.

    Images without sentences are skipped. Without validation ids the
    training loss of each epoch is used for selection.
    """
    train_ids = [i for i in train_ids if manifest.entry(i).sentence_ids]
    val_ids = list(val_ids)
    if not train_ids:
        raise EmptyDataset("no training images with finding-sentences")
    if set(train_ids) & set(val_ids):
        raise ConfigError("train and validation ids overlap")
    init_rng, shuffle_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(2))
    model = model or build_model(config, manifest.embedding_dim, init_rng)
    steps_per_epoch = math.ceil(len(train_ids) / config.batch_size)
    total_steps = config.total_epochs * steps_per_epoch
    if config.max_steps:
        total_steps = min(total_steps, config.max_steps)
    params = model_params(model)
    state = OptimizerState.zeros_like(params)
    result = TrainResult(model=copy.deepcopy(model))
    stale = 0
    step = 0
    for epoch in range(config.total_epochs):
        epoch_losses = []
        for ids in _batches(train_ids, config.batch_size, shuffle_rng):
            if step >= total_steps:
                break
            batch = load_batch(manifest, ids)
            loss, grads = total_loss_and_grads(batch, model, config.threads, config.deterministic)
            step += 1
            params, lr = optimizer_step(state, params, grad_dict(grads), config, step, total_steps)
            apply_params(model, params)
            params["tau"] = np.asarray(model.temp.tau)
            result.curve.append((step, loss.l_i, loss.l_t, loss.total, lr))
            epoch_losses.append(loss.total)
        if not epoch_losses:
            break
        if val_ids:
            val = evaluate_loss(manifest, val_ids, model, config.batch_size)
        else:
            val = float(np.mean(epoch_losses))
        result.val_losses.append(val)
        log.info("epoch %d step %d train %.5f val %.5f", epoch, step, np.mean(epoch_losses), val)
        if on_epoch:
            on_epoch(epoch, val)
        if val < result.best_val:
            result.best_val, result.best_epoch = val, epoch
            result.model = copy.deepcopy(model)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stopping after %d epochs without improvement", stale)
                break
    result.steps = step
    return result


def save_checkpoint(path, model, config=None):
    echo = {
        "head": model.head.config(),
        "tau": model.temp.tau,
        "max_scale": model.temp.max_scale,
        "similarity": model.similarity,
        "text_projection": model.text is not None,
        "train_config": config.to_dict() if config is not None else None,
    }
    raw = json.dumps(echo, sort_keys=True).encode("utf-8")
    blocks = dict(model_params(model))
    blocks["tau"] = np.asarray([[model.temp.tau]])
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(raw)), raw, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        nb = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(nb)) + nb + encode_matrix(arr.reshape(-1, arr.shape[-1]) if arr.ndim else arr.reshape(1, 1)))
    _atomic_write(path, b"".join(parts))


def load_checkpoint(path):
    """Returns ``(model, echo)``; ``tau`` keeps full precision from the JSON echo."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise BadMagic(f"{path}: not a VLCK checkpoint")
    if len(buf) < 10:
        raise TruncatedFile(f"{path}: header truncated")
    version, n = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise VersionUnsupported(f"{path}: checkpoint version {version}")
    offset = 10
    echo = json.loads(buf[offset:offset + n].decode("utf-8"))
    offset += n
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    blocks = {}
    for _ in range(count):
        (nl,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = buf[offset:offset + nl].decode("utf-8")
        offset += nl
        blocks[name], offset = decode_matrix(buf, offset)
    head = HeadParams(**echo["head"])
    shapes = head.shapes()
    head.params = {k: blocks[f"head.{k}"].reshape(s) for k, s in shapes.items()}
    head.check()
    text = None
    if echo["text_projection"]:
        D = head.hidden_dim
        text = {"w": blocks["text.w"].reshape(D, D), "b": blocks["text.b"].reshape(D)}
    model = Model(head, Temperature(float(echo["tau"]), echo["max_scale"]), text, echo["similarity"])
    return model, echo


def write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "l_i", "l_t", "total", "lr"])
        for step, l_i, l_t, total, lr in curve:
            w.writerow([step, repr(float(l_i)), repr(float(l_t)), repr(float(total)), repr(float(lr))])
