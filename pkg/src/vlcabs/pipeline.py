"""Dataset-level inference and evaluation used by the CLI and acceptance suite."""
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import DataError
from .inference import vl_similarity_maps
from .metrics import MetricResult, SIGMOID_INTERVAL, dice_with_search, pixel_auc, pointing_game, roc_auc


def infer_probabilities(manifest, image_ids, model=None, prompts=None):
    """``{image_id: {prompt_id: probability}}`` against the prompt catalogue."""
    from .inference import classify

    prompts = prompts if prompts is not None else manifest.prompt_embeddings()
    if not prompts:
        raise DataError("manifest has no prompt catalogue")
    out = {}
    for image_id in image_ids:
        probs = classify(manifest.image(image_id), prompts, model)
        out[image_id] = {p.sentence_id: float(v) for p, v in zip(prompts, probs)}
    return out


def collect(manifest, gt, image_ids, model=None, threads=1):
    """Maps and labels for every (image, concept) pair of ``image_ids``."""
    prompts = manifest.prompt_embeddings()
    if len(prompts) != len(gt.concepts):
        raise DataError("prompt catalogue does not match ground-truth concepts")

    def one(image_id):
        return image_id, vl_similarity_maps(manifest.image(image_id), prompts, model)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, image_ids))
    else:
        results = [one(i) for i in image_ids]
    return results


def evaluate(manifest, gt, image_ids, model=None, interval=SIGMOID_INTERVAL, metrics=None,
             pooled_dice=False, threads=1):
    """Compute the selected metrics (default: all four) over ``image_ids``."""
    metrics = set(metrics or ("auc", "pointing", "dice", "pixel_auc"))
    scores, labels = [], []
    hits = []
    pos_maps, pos_masks = [], []
    all_maps, all_masks = [], []
    for image_id, maps in collect(manifest, gt, image_ids, model, threads):
        truth = gt.images[image_id]
        for c, pmap in enumerate(maps):
            present = c in truth.rects
            scores.append(pmap.probability)
            labels.append(int(present))
            if present:
                hits.append(pointing_game(pmap, truth.boxes[c]))
                pos_maps.append(pmap.values)
                pos_masks.append(truth.masks[c])
            if "pixel_auc" in metrics:
                all_maps.append(pmap.values)
                all_masks.append(truth.masks[c] if present else np.zeros(pmap.values.shape, bool))
    results = []
    if "auc" in metrics:
        results.append(MetricResult("auc", roc_auc(scores, labels), len(scores)))
    if "pointing" in metrics:
        results.append(MetricResult("pointing", float(np.mean(hits)) if hits else float("nan"), len(hits)))
    if "dice" in metrics:
        t, d = dice_with_search(pos_maps, pos_masks, interval, pooled=pooled_dice)
        results.append(MetricResult("dice", d, len(pos_maps), t))
    if "pixel_auc" in metrics:
        results.append(MetricResult("pixel_auc", pixel_auc(all_maps, all_masks), len(all_maps)))
    return results
