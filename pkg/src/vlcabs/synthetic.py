"""Planted-alignment synthetic datasets and brute-force oracles.

Each concept ``c`` gets a random unit direction ``t_c``. An image containing
``c`` has a rectangle of patches set to::

    normalize(alpha * t_c + sqrt(1 - alpha^2) * u + noise_level * g / sqrt(D))

with ``u`` a random unit vector and ``g`` standard Gaussian; every other patch
is a random unit vector. Sentence embeddings are ``t_c`` jittered by the same
``noise_level`` term. Images are padded to a square and "resized" to the
model input, and ground truth is emitted in original-image pixels.
"""
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .cabs import Temperature
from .errors import InvalidSpec
from .inference import read_pgm, write_pgm
from .objective import LossBreakdown
from .store import GeometryMeta, Manifest, ManifestEntry, _atomic_write, write_container

_LOCATIONS = ("upper", "middle", "lower")
_SIDES = ("left", "central", "right")


@dataclass
class PlantSpec:
    grid_side: int = 16
    embed_dim: int = 64
    num_concepts: int = 8
    n_train: int = 256
    n_val: int = 32
    n_test: int = 64
    concepts_per_image: tuple = (1, 3)
    region_size: tuple = (2, 5)  # patches per side, inclusive range
    signal_strength: float = 0.8
    noise_level: float = 0.1
    patch_pixels: int = 14
    max_pad_fraction: float = 0.2
    size_jitter: float = 0.25
    regions: list = None  # [{"image": i, "concept": c, "rect": [r0, c0, r1, c1]}]
    seed: int = 0

    def __post_init__(self):
        self.concepts_per_image = tuple(self.concepts_per_image)
        self.region_size = tuple(self.region_size)
        self.validate()

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidSpec(f"unknown spec field(s): {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["concepts_per_image"] = list(self.concepts_per_image)
        d["region_size"] = list(self.region_size)
        return d

    @property
    def num_images(self):
        return self.n_train + self.n_val + self.n_test

    @property
    def model_input_size(self):
        return self.grid_side * self.patch_pixels

    def validate(self):
        def need(cond, name, msg):
            if not cond:
                raise InvalidSpec(f"{name}: {msg}")

        for name in ("grid_side", "embed_dim", "num_concepts", "patch_pixels"):
            need(isinstance(getattr(self, name), int) and getattr(self, name) > 0, name, "must be a positive integer")
        need(self.embed_dim >= 2, "embed_dim", "must be at least 2")
        need(0.0 <= self.signal_strength <= 1.0, "signal_strength", "must lie in [0, 1]")
        need(self.noise_level >= 0.0, "noise_level", "must be non-negative")
        need(0.0 <= self.max_pad_fraction < 1.0, "max_pad_fraction", "must lie in [0, 1)")
        need(0.0 <= self.size_jitter < 1.0, "size_jitter", "must lie in [0, 1)")
        for name in ("n_train", "n_val", "n_test"):
            need(getattr(self, name) >= 0, name, "must be non-negative")
        need(self.num_images > 0, "n_train", "dataset would be empty")
        lo, hi = self.concepts_per_image
        need(1 <= lo <= hi <= self.num_concepts, "concepts_per_image",
             f"need 1 <= min <= max <= num_concepts ({self.num_concepts})")
        lo, hi = self.region_size
        need(1 <= lo <= hi <= self.grid_side, "region_size", f"need 1 <= min <= max <= grid_side ({self.grid_side})")
        for k, r in enumerate(self.regions or []):
            name = f"regions[{k}]"
            need(isinstance(r, dict) and {"image", "concept", "rect"} <= set(r), name,
                 "needs image, concept and rect")
            need(0 <= r["image"] < self.num_images, f"{name}.image", "out of range")
            need(0 <= r["concept"] < self.num_concepts, f"{name}.concept", "out of range")
            rect = r["rect"]
            need(len(rect) == 4, f"{name}.rect", "must be [r0, c0, r1, c1]")
            r0, c0, r1, c1 = rect
            need(0 <= r0 <= r1 < self.grid_side and 0 <= c0 <= c1 < self.grid_side, f"{name}.rect",
                 f"must lie within the {self.grid_side}x{self.grid_side} grid with r0<=r1, c0<=c1")


@dataclass
class ImageTruth:
    image_id: str
    split: str
    geometry: GeometryMeta
    rects: dict  # concept -> [r0, c0, r1, c1] in patch grid coordinates
    boxes: dict = field(default_factory=dict)  # concept -> [x0, y0, x1, y1] original pixels
    masks: dict = field(default_factory=dict)  # concept -> bool array


@dataclass
class GroundTruth:
    concepts: list  # prompt ids, index = concept
    images: dict  # image_id -> ImageTruth

    def split(self, name):
        return [k for k, v in self.images.items() if v.split == name]

    def label(self, image_id, concept):
        return int(concept in self.images[image_id].rects)


def _unit(v, axis=-1):
    return v / np.linalg.norm(v, axis=axis, keepdims=True)


def rect_mask(rect, geometry, grid_side):
    """Original-resolution mask of a patch rectangle, via pixel centres."""
    r0, c0, r1, c1 = rect
    g = geometry
    s = g.model_input_size
    p = s / grid_side
    ys = (np.arange(g.original_height) + g.pad_top + 0.5) * s / g.padded_height
    xs = (np.arange(g.original_width) + g.pad_left + 0.5) * s / g.padded_width
    in_y = (ys >= r0 * p) & (ys < (r1 + 1) * p)
    in_x = (xs >= c0 * p) & (xs < (c1 + 1) * p)
    return in_y[:, None] & in_x[None, :]


def mask_box(mask):
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return [int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])]


def _random_geometry(spec, rng):
    s = spec.model_input_size
    padded = int(round(s * rng.uniform(1 - spec.size_jitter, 1 + spec.size_jitter)))
    pad = int(rng.integers(0, int(spec.max_pad_fraction * padded) + 1))
    a, b = pad // 2, pad - pad // 2
    if rng.random() < 0.5:
        return GeometryMeta(padded, padded - pad, s, pad_left=a, pad_right=b)
    return GeometryMeta(padded - pad, padded, s, pad_top=a, pad_bottom=b)


def _place(rng, spec, taken):
    lo, hi = spec.region_size
    for _ in range(100):
        h, w = rng.integers(lo, hi + 1, size=2)
        r0 = int(rng.integers(0, spec.grid_side - h + 1))
        c0 = int(rng.integers(0, spec.grid_side - w + 1))
        rect = [r0, c0, r0 + int(h) - 1, c0 + int(w) - 1]
        if not taken[rect[0]:rect[2] + 1, rect[1]:rect[3] + 1].any():
            return rect
    return None


def _location(rect, grid_side):
    r = (rect[0] + rect[2]) / 2 / grid_side
    c = (rect[1] + rect[3]) / 2 / grid_side
    return f"the {_LOCATIONS[min(2, int(r * 3))]} {_SIDES[min(2, int(c * 3))]} zone"


def _planted(rng, t, alpha, noise, D):
    u = _unit(rng.standard_normal(D))
    return _unit(alpha * t + math.sqrt(max(0.0, 1 - alpha * alpha)) * u
                 + noise * rng.standard_normal(D) / math.sqrt(D))


def generate(spec, out_dir):
    """Write a planted dataset to ``out_dir``; returns ``(Manifest, GroundTruth)``.

    Output is a pure function of ``spec`` (per-image sub-seeds derived from
    ``spec.seed``).
    """
    spec.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    D, G = spec.embed_dim, spec.grid_side
    root_seq = np.random.SeedSequence(spec.seed)
    concept_seq, *image_seqs = root_seq.spawn(1 + spec.num_images)
    concept_rng = np.random.default_rng(concept_seq)
    concepts = _unit(concept_rng.standard_normal((spec.num_concepts, D)))
    explicit = {}
    for r in spec.regions or []:
        explicit.setdefault(r["image"], {})[r["concept"]] = list(r["rect"])

    splits = ["train"] * spec.n_train + ["val"] * spec.n_val + ["test"] * spec.n_test
    entries, sent_rows, sent_ids, sent_text = [], [], [], {}
    truth = {}
    for i in range(spec.num_images):
        rng = np.random.default_rng(image_seqs[i])
        image_id = f"img{i:05d}"
        geometry = _random_geometry(spec, rng)
        patches = _unit(rng.standard_normal((G * G, D)))
        taken = np.zeros((G, G), dtype=bool)
        if i in explicit:
            rects = explicit[i]
        else:
            lo, hi = spec.concepts_per_image
            chosen = rng.choice(spec.num_concepts, size=int(rng.integers(lo, hi + 1)), replace=False)
            rects = {}
            for c in sorted(int(c) for c in chosen):
                rect = _place(rng, spec, taken)
                if rect is None:
                    continue
                rects[c] = rect
                taken[rect[0]:rect[2] + 1, rect[1]:rect[3] + 1] = True
        grid = patches.reshape(G, G, D)
        sids = []
        for c, (r0, c0, r1, c1) in sorted(rects.items()):
            for r in range(r0, r1 + 1):
                for q in range(c0, c1 + 1):
                    grid[r, q] = _planted(rng, concepts[c], spec.signal_strength, spec.noise_level, D)
            sid = f"{image_id}_c{c}"
            sent = _unit(concepts[c] + spec.noise_level * rng.standard_normal(D) / math.sqrt(D))
            sent_rows.append(sent)
            sent_ids.append(sid)
            sent_text[sid] = f"There is finding {c} of {_location([r0, c0, r1, c1], G)}"
            sids.append(sid)
        cls = _unit(patches.mean(axis=0)) if np.linalg.norm(patches.mean(axis=0)) > 1e-9 else patches[0]
        tokens = np.vstack([cls[None], patches]).astype(np.float32)
        container = f"images/{image_id}.vlce"
        write_container(out / container, tokens, ["cls"] + [f"p{k}" for k in range(G * G)])
        entries.append(ManifestEntry(image_id, container, sids, geometry))
        it = ImageTruth(image_id, splits[i], geometry, {int(c): r for c, r in rects.items()})
        for c, rect in it.rects.items():
            m = rect_mask(rect, geometry, G)
            it.masks[c] = m
            it.boxes[c] = mask_box(m)
            write_pgm(out / "masks" / f"{image_id}_c{c}.pgm", m.astype(np.uint8) * 255)
        truth[image_id] = it

    write_container(out / "sentences.vlce", np.array(sent_rows, dtype=np.float32).reshape(-1, D), sent_ids)
    prompt_ids = [f"concept{c}" for c in range(spec.num_concepts)]
    write_container(out / "prompts.vlce", concepts.astype(np.float32), prompt_ids)
    manifest = Manifest(out, D, entries, "sentences.vlce", sent_text, prompts="prompts.vlce",
                        prompt_text={p: f"There is finding {c}" for c, p in enumerate(prompt_ids)})
    manifest.save()
    gt = GroundTruth(prompt_ids, truth)
    save_ground_truth(out / "ground_truth.json", gt, spec)
    return manifest, gt


def save_ground_truth(path, gt, spec=None):
    doc = {
        "concepts": gt.concepts,
        "spec": spec.to_dict() if spec is not None else None,
        "splits": {s: gt.split(s) for s in ("train", "val", "test")},
        "images": {
            k: {
                "split": v.split,
                "labels": {p: int(c in v.rects) for c, p in enumerate(gt.concepts)},
                "rects": {gt.concepts[c]: r for c, r in sorted(v.rects.items())},
                "boxes": {gt.concepts[c]: [b] for c, b in sorted(v.boxes.items())},
                "masks": {gt.concepts[c]: f"masks/{k}_c{c}.pgm" for c in sorted(v.rects)},
            }
            for k, v in gt.images.items()
        },
    }
    _atomic_write(path, (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode("utf-8"))


def load_ground_truth(path, manifest):
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    concepts = doc["concepts"]
    index = {p: c for c, p in enumerate(concepts)}
    images = {}
    for k, v in doc["images"].items():
        it = ImageTruth(k, v["split"], manifest.entry(k).geometry,
                        {index[p]: r for p, r in v["rects"].items()})
        it.boxes = {index[p]: b[0] for p, b in v["boxes"].items()}
        it.masks = {index[p]: read_pgm(path.parent / f) > 127 for p, f in v["masks"].items()}
        images[k] = it
    return GroundTruth(concepts, images)


# -- brute-force oracles (float64, loop-literal) ---------------------------

def _cos(a, b):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def oracle_logit(tokens, sentence, scale):
    """Per-pair logit by explicit loops over tokens and coordinates."""
    tokens = [list(map(float, row)) for row in np.asarray(tokens, dtype=np.float64)]
    t = list(map(float, np.asarray(sentence, dtype=np.float64).ravel()))
    s = [_cos(v, t) * scale for v in tokens]
    m = max(s)
    z = [math.exp(x - m) for x in s]
    total = sum(z)
    a = [x / total for x in z]
    w = [sum(a[k] * tokens[k][d] for k in range(len(tokens))) for d in range(len(t))]
    return _cos(w, t) * scale


def oracle_logits(batch, model=None, temp=None):
    if model is None:
        temp = temp or Temperature()
        tokens = [im.tokens for im in batch.images]
        sents = batch.sentence_matrix()
        scale = temp.scale
    else:
        tokens = [model.image_tokens(im.tokens) for im in batch.images]
        sents = model.project_text(batch.sentence_matrix())
        scale = model.temp.scale
    return [[oracle_logit(V, t, scale) for t in sents] for V in tokens]


def brute_force_loss(batch, model=None, temp=None):
    """Both contrastive losses by literal index loops over images and sentences."""
    lg = oracle_logits(batch, model, temp)
    B = batch.batch_size
    groups = [list(p) for p in batch.positives]
    n_t = sum(len(g) for g in groups)
    l_i = l_t = 0.0
    for i in range(B):
        for c in groups[i]:
            pos = math.exp(lg[i][c])
            neg_i = sum(math.exp(lg[i][m]) for j in range(B) if j != i for m in groups[j])
            neg_t = sum(math.exp(lg[j][c]) for j in range(B) if j != i)
            l_i -= math.log(pos / (pos + neg_i))
            l_t -= math.log(pos / (pos + neg_t))
    l_i /= n_t
    l_t /= n_t
    return LossBreakdown(l_i, l_t, l_i + l_t)
