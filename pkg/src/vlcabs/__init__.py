"""Similarity-based vision-language cross-attention on pre-computed embeddings.

Covers the cross-attention scores and maps, the contrastive training
objective with hand-derived gradients, zero-shot inference, evaluation
metrics, a binary embedding store, and a planted synthetic benchmark.
"""
from ._backend import BACKEND
from .cabs import (
    TAU_INIT,
    Temperature,
    attended_embedding,
    attention_weights,
    global_logit,
    logit_matrix,
    patch_scores,
    similarity_map,
)
from .errors import VlcabsError
from .head import HeadParams, head_forward, init_head
from .inference import classify, open_vocab_segment, vl_similarity_map, vl_similarity_maps
from .metrics import dice_with_search, pixel_auc, pointing_game, roc_auc
from .objective import Model, infonce_loss, mpnce_loss, total_loss_and_grads
from .store import (
    GeometryMeta,
    Manifest,
    PairedBatch,
    PatchEmbeddingSet,
    SentenceEmbedding,
    load_batch,
    read_container,
    write_container,
)
from .tensor import bilinear_resize, l2_normalize, sigmoid, stable_softmax
from .train import TrainConfig, optimizer_step, train

__version__ = "0.1.0"
