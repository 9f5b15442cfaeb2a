"""Binary embedding containers, the JSON manifest, and paired batches.

VLCE layout (all little-endian)::

    b"VLCE" | u16 version | u32 rows | u32 cols | rows*cols float32 (row-major)
    | rows x (u32 byte length | UTF-8 id)

The manifest is a JSON document next to the containers::

    {
      "version": 1,
      "embedding_dim": 768,
      "sentences": {"container": "sentences.vlce", "text": {"<id>": "There is ..."}},
      "prompts":   {"container": "prompts.vlce",   "text": {...}},        # optional
      "entries": [
        {"image_id": "img0", "container": "images/img0.vlce",
         "sentence_ids": ["s0", "s1"], "view": null,
         "geometry": {"original_height": 512, "original_width": 448,
                      "pad_top": 0, "pad_bottom": 0, "pad_left": 32, "pad_right": 32,
                      "model_input_size": 518}}
      ]
    }

Image containers hold ``L + 1`` rows: the CLS embedding first, then the
patches in row-major grid order.
"""
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagic,
    ConfigError,
    DataError,
    DimensionMismatch,
    EmptyPositives,
    NumericError,
    TruncatedFile,
    UnknownId,
    VersionUnsupported,
)

MAGIC = b"VLCE"
VERSION = 1
MANIFEST_VERSION = 1
_HEADER = struct.Struct("<4sHII")


def encode_matrix(matrix):
    """Raw ``u32 rows | u32 cols | float32 payload`` block."""
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {m.shape}")
    return struct.pack("<II", *m.shape) + m.tobytes()


def decode_matrix(buf, offset=0):
    """Inverse of :func:`encode_matrix`; returns ``(matrix, new_offset)``."""
    if len(buf) < offset + 8:
        raise TruncatedFile("matrix header truncated")
    rows, cols = struct.unpack_from("<II", buf, offset)
    offset += 8
    nbytes = 4 * rows * cols
    if len(buf) < offset + nbytes:
        raise TruncatedFile(f"expected {nbytes} payload bytes, found {len(buf) - offset}")
    m = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=offset)
    return m.reshape(rows, cols).astype(np.float32), offset + nbytes


def _atomic_write(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_container(path, embeddings, ids):
    m = np.asarray(embeddings, dtype=np.float32)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {m.shape}")
    ids = list(ids)
    if len(ids) != m.shape[0]:
        raise DimensionMismatch(f"{len(ids)} ids for {m.shape[0]} rows")
    if not np.all(np.isfinite(m)):
        raise NumericError("container payload must be finite")
    parts = [_HEADER.pack(MAGIC, VERSION, *m.shape), np.ascontiguousarray(m, dtype="<f4").tobytes()]
    for ident in ids:
        if not isinstance(ident, str) or not ident:
            raise DataError("container ids must be non-empty strings")
        raw = ident.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    _atomic_write(path, b"".join(parts))


def read_container(path):
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic(f"{path}: not a VLCE container")
    if len(buf) < _HEADER.size:
        raise TruncatedFile(f"{path}: header truncated")
    _, version, rows, cols = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise VersionUnsupported(f"{path}: container version {version}")
    offset = _HEADER.size
    nbytes = 4 * rows * cols
    if len(buf) < offset + nbytes:
        raise TruncatedFile(f"{path}: payload truncated")
    data = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=offset).reshape(rows, cols)
    offset += nbytes
    ids = []
    for _ in range(rows):
        if len(buf) < offset + 4:
            raise TruncatedFile(f"{path}: id table truncated")
        (n,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if len(buf) < offset + n:
            raise TruncatedFile(f"{path}: id table truncated")
        ids.append(buf[offset:offset + n].decode("utf-8"))
        offset += n
    if offset != len(buf):
        raise DataError(f"{path}: {len(buf) - offset} trailing bytes")
    return data.astype(np.float32), ids


@dataclass(frozen=True)
class GeometryMeta:
    original_height: int
    original_width: int
    model_input_size: int
    pad_top: int = 0
    pad_bottom: int = 0
    pad_left: int = 0
    pad_right: int = 0

    def __post_init__(self):
        for name in ("original_height", "original_width", "model_input_size"):
            if getattr(self, name) <= 0:
                raise DataError(f"geometry.{name} must be positive")
        for name in ("pad_top", "pad_bottom", "pad_left", "pad_right"):
            if getattr(self, name) < 0:
                raise DataError(f"geometry.{name} must be non-negative")

    @property
    def padded_height(self):
        return self.original_height + self.pad_top + self.pad_bottom

    @property
    def padded_width(self):
        return self.original_width + self.pad_left + self.pad_right

    def crop_box(self):
        """Non-padded window ``(top, bottom, left, right)`` in model-input pixels.

        ``bottom``/``right`` are exclusive.
        """
        s = self.model_input_size
        sy = s / self.padded_height
        sx = s / self.padded_width
        top = int(round(self.pad_top * sy))
        bottom = s - int(round(self.pad_bottom * sy))
        left = int(round(self.pad_left * sx))
        right = s - int(round(self.pad_right * sx))
        return top, max(bottom, top + 1), left, max(right, left + 1)

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        try:
            return cls(**{k: int(v) for k, v in d.items()})
        except TypeError as exc:
            raise DataError(f"bad geometry record: {exc}") from None

    @classmethod
    def identity(cls, size):
        return cls(original_height=size, original_width=size, model_input_size=size)


@dataclass
class PatchEmbeddingSet:
    """CLS token plus ``L`` patch embeddings of one image, stored as one array."""

    image_id: str
    tokens: np.ndarray  # (L + 1, D), row 0 is CLS
    geometry: GeometryMeta = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float32)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 2:
            raise DimensionMismatch(f"{self.image_id}: need CLS plus at least one patch")
        side = math.isqrt(self.num_patches)
        if side * side != self.num_patches:
            raise DimensionMismatch(f"{self.image_id}: {self.num_patches} patches is not a square grid")
        if not np.all(np.isfinite(self.tokens)):
            raise NumericError(f"{self.image_id}: non-finite embedding")
        if self.geometry is None:
            self.geometry = GeometryMeta.identity(side)

    @property
    def cls_embedding(self):
        return self.tokens[0]

    @property
    def patch_embeddings(self):
        return self.tokens[1:]

    @property
    def num_patches(self):
        return self.tokens.shape[0] - 1

    @property
    def dim(self):
        return self.tokens.shape[1]

    @property
    def grid_side(self):
        return math.isqrt(self.num_patches)


@dataclass
class SentenceEmbedding:
    sentence_id: str
    text: str
    embedding: np.ndarray

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float32).ravel()
        if not self.text:
            raise DataError(f"{self.sentence_id}: empty prompt text")
        if not np.all(np.isfinite(self.embedding)):
            raise NumericError(f"{self.sentence_id}: non-finite embedding")


@dataclass
class PairedBatch:
    """``B`` images, each with ``N_i >= 1`` positive sentences.

    ``positives[i]`` lists indices into ``sentences``; together they must
    cover every sentence exactly once, so the logit table has
    ``N_T = sum(N_i)`` columns.
    """

    images: list
    positives: list
    sentences: list
    owners: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.images) != len(self.positives):
            raise DimensionMismatch("one positives list per image required")
        n_t = len(self.sentences)
        owners = np.full(n_t, -1, dtype=np.intp)
        for i, pos in enumerate(self.positives):
            if len(pos) == 0:
                raise EmptyPositives(f"image {self.images[i].image_id} has no finding-sentences")
            for j in pos:
                if not 0 <= j < n_t:
                    raise DataError(f"sentence index {j} out of range")
                if owners[j] >= 0:
                    raise DataError(f"sentence index {j} assigned to two images")
                owners[j] = i
        if np.any(owners < 0):
            raise DataError("every sentence must be a positive of exactly one image")
        dims = {im.dim for im in self.images} | {s.embedding.shape[0] for s in self.sentences}
        if len(dims) > 1:
            raise DimensionMismatch(f"inconsistent embedding dims {sorted(dims)}")
        self.owners = owners

    @property
    def batch_size(self):
        return len(self.images)

    @property
    def num_sentences(self):
        return len(self.sentences)

    def sentence_matrix(self):
        return np.stack([s.embedding for s in self.sentences])

    def token_stack(self):
        return [im.tokens for im in self.images]

    @classmethod
    def from_arrays(cls, tokens, sentences, counts, ids=None):
        """Build a batch from raw arrays; sentences are grouped by image in order."""
        images = [PatchEmbeddingSet(f"img{i}" if ids is None else ids[i], t) for i, t in enumerate(tokens)]
        sents = [SentenceEmbedding(f"s{j}", f"sentence {j}", e) for j, e in enumerate(sentences)]
        positives, start = [], 0
        for n in counts:
            positives.append(list(range(start, start + n)))
            start += n
        return cls(images, positives, sents)


@dataclass
class ManifestEntry:
    image_id: str
    container: str
    sentence_ids: list
    geometry: GeometryMeta
    view: str = None


class Manifest:
    """Parsed manifest with lazily loaded, cached containers."""

    def __init__(self, root, embedding_dim, entries, sentences, sentence_text,
                 prompts=None, prompt_text=None, version=MANIFEST_VERSION):
        self.root = Path(root)
        self.version = version
        self.embedding_dim = embedding_dim
        self.entries = entries
        self.sentences = sentences
        self.sentence_text = sentence_text
        self.prompts = prompts
        self.prompt_text = prompt_text or {}
        self._by_id = {e.image_id: e for e in entries}
        if len(self._by_id) != len(entries):
            raise DataError("duplicate image_id in manifest")
        self._images = {}
        self._sentences = None
        self._prompts = None

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        if not path.exists():
            raise ConfigError(f"manifest not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None
        if doc.get("version") != MANIFEST_VERSION:
            raise VersionUnsupported(f"manifest version {doc.get('version')}")
        try:
            entries = [
                ManifestEntry(
                    image_id=e["image_id"],
                    container=e["container"],
                    sentence_ids=list(e.get("sentence_ids", [])),
                    geometry=GeometryMeta.from_dict(e["geometry"]),
                    view=e.get("view"),
                )
                for e in doc["entries"]
            ]
            sent = doc["sentences"]
            prompts = doc.get("prompts")
            return cls(
                root=path.parent,
                embedding_dim=int(doc["embedding_dim"]),
                entries=entries,
                sentences=sent["container"],
                sentence_text=dict(sent.get("text", {})),
                prompts=prompts["container"] if prompts else None,
                prompt_text=dict(prompts.get("text", {})) if prompts else None,
            )
        except KeyError as exc:
            raise DataError(f"{path}: missing manifest field {exc}") from None

    def to_dict(self):
        doc = {
            "version": self.version,
            "embedding_dim": self.embedding_dim,
            "sentences": {"container": self.sentences, "text": self.sentence_text},
            "entries": [
                {
                    "image_id": e.image_id,
                    "container": e.container,
                    "sentence_ids": e.sentence_ids,
                    "geometry": e.geometry.to_dict(),
                    "view": e.view,
                }
                for e in self.entries
            ],
        }
        if self.prompts:
            doc["prompts"] = {"container": self.prompts, "text": self.prompt_text}
        return doc

    def save(self, path=None):
        path = Path(path) if path else self.root / "manifest.json"
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        _atomic_write(path, text.encode("utf-8"))
        return path

    @property
    def image_ids(self):
        return [e.image_id for e in self.entries]

    def entry(self, image_id):
        try:
            return self._by_id[image_id]
        except KeyError:
            raise UnknownId(f"unknown image id {image_id!r}") from None

    def _sentence_table(self):
        if self._sentences is None:
            data, ids = read_container(self.root / self.sentences)
            if data.shape[1] != self.embedding_dim:
                raise DimensionMismatch(
                    f"sentence container dim {data.shape[1]} != manifest dim {self.embedding_dim}")
            self._sentences = {sid: data[r] for r, sid in enumerate(ids)}
        return self._sentences

    def image(self, image_id):
        if image_id not in self._images:
            e = self.entry(image_id)
            data, _ = read_container(self.root / e.container)
            if data.shape[1] != self.embedding_dim:
                raise DimensionMismatch(
                    f"{image_id}: container dim {data.shape[1]} != manifest dim {self.embedding_dim}")
            self._images[image_id] = PatchEmbeddingSet(image_id, data, e.geometry)
        return self._images[image_id]

    def sentence(self, sentence_id):
        table = self._sentence_table()
        if sentence_id not in table:
            raise UnknownId(f"unknown sentence id {sentence_id!r}")
        return SentenceEmbedding(sentence_id, self.sentence_text.get(sentence_id, sentence_id),
                                 table[sentence_id])

    def prompt_embeddings(self):
        """Prompt catalogue as a list of SentenceEmbedding (empty if none)."""
        if self._prompts is None:
            self._prompts = []
            if self.prompts:
                data, ids = read_container(self.root / self.prompts)
                if data.shape[1] != self.embedding_dim:
                    raise DimensionMismatch("prompt container dim mismatch")
                self._prompts = [SentenceEmbedding(pid, self.prompt_text.get(pid, pid), data[r])
                                 for r, pid in enumerate(ids)]
        return self._prompts

    def validate(self):
        """Load every referenced container and check dimensions."""
        table = self._sentence_table()
        for e in self.entries:
            self.image(e.image_id)
            for sid in e.sentence_ids:
                if sid not in table:
                    raise UnknownId(f"{e.image_id}: unknown sentence id {sid!r}")
        self.prompt_embeddings()

    def mean_positives(self):
        counts = [len(e.sentence_ids) for e in self.entries if e.sentence_ids]
        return float(np.mean(counts)) if counts else 0.0


def load_batch(manifest, image_ids):
    images, positives, sentences = [], [], []
    for image_id in image_ids:
        e = manifest.entry(image_id)
        if not e.sentence_ids:
            raise EmptyPositives(f"image {image_id} has no finding-sentences")
        images.append(manifest.image(image_id))
        start = len(sentences)
        sentences.extend(manifest.sentence(sid) for sid in e.sentence_ids)
        positives.append(list(range(start, len(sentences))))
    return PairedBatch(images, positives, sentences)
