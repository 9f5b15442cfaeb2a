"""Zero-shot classification, pixel-level similarity maps, and segmentation.

Map pipeline for one prompt, in this order:

1. reshape the ``L`` patch scores to a ``sqrt(L) x sqrt(L)`` grid;
2. bilinear resize to the square model input;
3. crop the padding that preprocessing added (in model-input pixels);
4. bilinear resize to the original image size;
5. elementwise sigmoid.
"""
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cabs import Temperature, forward_image
from .errors import ConfigError, DataError, GeometryMismatch
from .store import GeometryMeta, PatchEmbeddingSet, SentenceEmbedding, _atomic_write
from .tensor import bilinear_resize, sigmoid

FINDING_THRESHOLD = 0.7
ANATOMY_THRESHOLD = 0.4
BACKGROUND = -1


@dataclass
class PixelSimilarityMap:
    values: np.ndarray  # (H, W) float32 in (0, 1)
    source_prompt: str
    probability: float


@dataclass
class SegmentationResult:
    label_map: np.ndarray  # int32, BACKGROUND where no prompt clears the threshold
    threshold: float
    prompts: list


def _prepare(image, prompts, model):
    """Head-transformed tokens, projected prompts, scale and similarity kind."""
    tokens = image.tokens if isinstance(image, PatchEmbeddingSet) else np.asarray(image)
    E = np.stack([p.embedding if isinstance(p, SentenceEmbedding) else np.asarray(p).ravel()
                  for p in prompts])
    if model is None or isinstance(model, Temperature):
        temp = model or Temperature()
        return tokens.astype(np.float64), E.astype(np.float64), temp.scale, "cosine"
    return model.image_tokens(tokens), model.project_text(E), model.temp.scale, model.similarity


def _prompt_text(p, idx):
    return p.text if isinstance(p, SentenceEmbedding) else f"prompt {idx}"


def classify(image, prompts, model=None):
    """Similarity probability ``sigmoid(l)`` for each prompt, independently."""
    V, T, scale, sim = _prepare(image, prompts, model)
    logits, _ = forward_image(V, T, scale, sim)
    return sigmoid(logits)


def map_pipeline(grid, geometry):
    """Steps 2-5 of the module pipeline applied to one score grid."""
    g = geometry
    grid = np.asarray(grid, dtype=np.float32)
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise GeometryMismatch(f"score grid must be square, got {grid.shape}")
    s = g.model_input_size
    up = bilinear_resize(grid, s, s)
    top, bottom, left, right = g.crop_box()
    if bottom > s or right > s:
        raise GeometryMismatch("padding exceeds the model input")
    cropped = up[top:bottom, left:right]
    out = bilinear_resize(cropped, g.original_height, g.original_width)
    return sigmoid(out)


def vl_similarity_maps(image, prompts, model=None, geometry=None, threads=1):
    """One :class:`PixelSimilarityMap` per prompt (order preserved)."""
    geometry = geometry or getattr(image, "geometry", None)
    V, T, scale, sim = _prepare(image, prompts, model)
    logits, cache = forward_image(V, T, scale, sim)
    side = int(round(np.sqrt(V.shape[0] - 1)))
    if side * side != V.shape[0] - 1:
        raise GeometryMismatch(f"{V.shape[0] - 1} patches do not form a square grid")
    if geometry is None:
        geometry = GeometryMeta.identity(side)
    probs = sigmoid(logits)

    def one(c):
        grid = cache["S"][1:, c].reshape(side, side)
        return PixelSimilarityMap(map_pipeline(grid, geometry), _prompt_text(prompts[c], c), float(probs[c]))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(len(prompts))))
    return [one(c) for c in range(len(prompts))]


def vl_similarity_map(image, prompt, model=None, geometry=None):
    return vl_similarity_maps(image, [prompt], model, geometry)[0]


def segment_maps(maps, threshold, prompts=None):
    """Label each pixel with the highest-valued prompt whose map clears ``threshold``.

    Ties go to the lowest prompt index.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    values = np.stack([m.values if isinstance(m, PixelSimilarityMap) else np.asarray(m) for m in maps])
    if prompts is None:
        prompts = [m.source_prompt if isinstance(m, PixelSimilarityMap) else f"prompt {i}"
                   for i, m in enumerate(maps)]
    masked = np.where(values >= threshold, values, -np.inf)
    labels = np.argmax(masked, axis=0).astype(np.int32)
    labels[~np.any(values >= threshold, axis=0)] = BACKGROUND
    return SegmentationResult(labels, float(threshold), list(prompts))


def open_vocab_segment(image, prompts, threshold, model=None, geometry=None):
    maps = vl_similarity_maps(image, prompts, model, geometry)
    return segment_maps(maps, threshold)


def write_pgm(path, image):
    """Binary 8-bit PGM (P5)."""
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    _atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise DataError(f"{path}: only 8-bit P5 PGM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1)
    return pixels.reshape(h, w).copy()


def map_to_bytes(values):
    return np.clip(np.round(255.0 * np.asarray(values, dtype=np.float64)), 0, 255).astype(np.uint8)


def export_map(path, pmap):
    write_pgm(path, map_to_bytes(pmap.values))


def export_segmentation(path, result):
    """Label PGM (0 = background, ``k + 1`` = prompt ``k``) plus a JSON palette sidecar."""
    if len(result.prompts) > 254:
        raise ConfigError("at most 254 prompts fit an 8-bit label map")
    write_pgm(path, (result.label_map + 1).astype(np.uint8))
    palette = {"0": "background"}
    palette.update({str(k + 1): p for k, p in enumerate(result.prompts)})
    sidecar = Path(path).with_suffix(".json")
    _atomic_write(sidecar, (json.dumps({"threshold": result.threshold, "palette": palette},
                                       indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return sidecar
