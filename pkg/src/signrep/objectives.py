"""Training objectives: cross-modal similarity, contrastive and LM losses.

The contrastive side works on a pair of N x N similarity matrices (video
to text and text to video) scored either from pooled global embeddings or
from a fine-grained token-level alignment, then scaled by a trainable
temperature inside a symmetric InfoNCE. The generation side is standard
teacher-forced cross-entropy over non-PAD positions, with optional label
smoothing spread uniformly across the full vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

ALIGN_SHARPNESS = 0.1  # fixed softmax temperature of the token-alignment weighting


@dataclass
class SimilarityPair:
    """Video-to-text and text-to-video similarity matrices plus temperature.

    ``z_v2t[i, j]`` scores video i against text j; ``z_t2v[i, j]`` scores
    text i against video j. With global pooling the two are exact
    transposes; the fine-grained aggregation is direction-asymmetric.
    """

    z_v2t: Tensor
    z_t2v: Tensor
    temperature: Tensor

    @property
    def size(self) -> int:
        return self.z_v2t.shape[0]


@dataclass
class LossWeights:
    contrastive: float = 1.0
    generation: float = 1.0

    def __post_init__(self):
        if self.contrastive < 0 or self.generation < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.contrastive == 0 and self.generation == 0:
            raise ConfigError("at least one loss weight must be positive")


def _l2_normalize(tokens: Tensor) -> Tensor:
    norm_sq = T.tsum(tokens * tokens, axis=-1, keepdims=True)
    norm = T.sqrt(norm_sq + 1e-12)
    return tokens / T.broadcast_to(norm, tokens.shape)


def _masked_mean_pool(tokens: Tensor, mask: np.ndarray) -> Tensor:
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise ValueError("cannot pool a fully masked sequence")
    kept = tokens * mask[:, :, None].astype(tokens.dtype)
    summed = T.tsum(kept, axis=1)
    return summed / counts[:, None].astype(tokens.data.dtype)


def _aligned_scores(query_norm: Tensor, query_mask: np.ndarray,
                    key_norm: Tensor, key_mask: np.ndarray) -> Tensor:
    """(N, N) matrix: softmax-weighted token alignment, averaged over query tokens.

    For query item i and key item j, every valid query token attends over
    the valid key tokens of j (softmax of cosines at ALIGN_SHARPNESS) and
    collects its expected cosine; scores average over i's valid tokens.
    """
    n, tq, c = query_norm.shape
    tk = key_norm.shape[1]
    q2 = T.reshape(query_norm, (n * tq, c))
    k2 = T.reshape(key_norm, (n * tk, c))
    sims = T.matmul(q2, T.transpose(k2))                    # (N*Tq, N*Tk)
    sims = T.reshape(sims, (n, tq, n, tk))
    sims = T.transpose(sims, (0, 2, 1, 3))                  # (Nq, Nk, Tq, Tk)

    key_invalid = ~np.broadcast_to(key_mask[None, :, None, :], (n, n, tq, tk))
    masked = T.masked_fill(sims, key_invalid, -1e9)
    attn = T.softmax(masked / ALIGN_SHARPNESS, axis=-1)
    aligned = T.tsum(attn * T.masked_fill(sims, key_invalid, 0.0), axis=-1)  # (Nq, Nk, Tq)

    qmask = np.broadcast_to(query_mask[:, None, :], (n, n, tq)).astype(aligned.data.dtype)
    counts = query_mask.sum(axis=1).astype(aligned.data.dtype)              # (Nq,)
    pooled = T.tsum(aligned * qmask, axis=-1) / counts[:, None]             # (Nq, Nk)
    return pooled


def clcl_similarity(video_tokens: Tensor, video_mask: np.ndarray,
                    text_tokens: Tensor, text_mask: np.ndarray,
                    temperature: Tensor, mode: str = "fine_grained") -> SimilarityPair:
    """Score every (video, text) pair in the batch.

    ``fine_grained`` (default) aggregates token-level cosine alignments per
    direction; ``global`` mean-pools each sequence first and returns a
    symmetric cosine matrix. Both operate on L2-normalized embeddings.
    """
    video_mask = np.asarray(video_mask, dtype=bool)
    text_mask = np.asarray(text_mask, dtype=bool)
    if video_mask.sum(axis=1).min() == 0 or text_mask.sum(axis=1).min() == 0:
        raise ValueError("similarity needs at least one valid token per sequence")
    if mode == "global":
        v = _l2_normalize(_masked_mean_pool(video_tokens, video_mask))
        t = _l2_normalize(_masked_mean_pool(text_tokens, text_mask))
        z_v2t = T.matmul(v, T.transpose(t))
        z_t2v = T.transpose(z_v2t)
        return SimilarityPair(z_v2t=z_v2t, z_t2v=z_t2v, temperature=temperature)
    if mode != "fine_grained":
        raise ConfigError(f"unknown similarity mode {mode!r}")
    v_norm = _l2_normalize(video_tokens)
    t_norm = _l2_normalize(text_tokens)
    z_v2t = _aligned_scores(v_norm, video_mask, t_norm, text_mask)
    z_t2v = _aligned_scores(t_norm, text_mask, v_norm, video_mask)
    return SimilarityPair(z_v2t=z_v2t, z_t2v=z_t2v, temperature=temperature)


def info_nce(sim: SimilarityPair) -> Tensor:
    """Symmetric contrastive loss over temperature-scaled similarity rows.

    Each direction is the mean cross-entropy of a matrix row against its
    diagonal entry; the two directions add.
    """
    n = sim.size
    if n < 2:
        raise ValueError(f"contrastive loss needs a batch of >= 2 pairs, got {n}")
    diag = np.arange(n)
    total = None
    for z in (sim.z_v2t, sim.z_t2v):
        logits = z / T.broadcast_to(sim.temperature, z.shape)
        logp = T.log_softmax(logits, axis=1)
        picked = T.tsum(logp * np.eye(n, dtype=logp.data.dtype), axis=1)
        term = -T.tmean(picked)
        total = term if total is None else total + term
    return total


def sequence_ce(logits: Tensor, targets: np.ndarray, target_mask: np.ndarray,
                smoothing: float = 0.0, per_sentence: bool = False) -> Tensor:
    """Teacher-forced cross-entropy over non-PAD target positions.

    ``smoothing`` mixes the one-hot target with a uniform distribution over
    the full vocabulary. The default normalization is a mean over real
    tokens; ``per_sentence`` instead sums per sentence and averages over
    the batch (the literal sentence-likelihood form).
    """
    if not 0.0 <= smoothing < 1.0:
        raise ConfigError(f"smoothing must be in [0, 1), got {smoothing}")
    targets = np.asarray(targets)
    target_mask = np.asarray(target_mask, dtype=bool)
    n, u, v = logits.shape
    if targets.shape != (n, u) or target_mask.shape != (n, u):
        raise ValueError(
            f"targets/mask shape {targets.shape}/{target_mask.shape} does not "
            f"match logits {logits.shape}"
        )
    logp = T.log_softmax(logits, axis=-1)
    one_hot = np.zeros((n, u, v), dtype=logp.data.dtype)
    rows, cols = np.nonzero(target_mask)
    one_hot[rows, cols, targets[rows, cols]] = 1.0
    dist = (1.0 - smoothing) * one_hot
    if smoothing:
        dist = dist + smoothing / v
    dist *= target_mask[:, :, None]  # PAD positions contribute nothing
    token_nll = -T.tsum(logp * dist, axis=-1)  # (N, U)
    if per_sentence:
        return T.tsum(token_nll) / n
    return T.tsum(token_nll) / int(target_mask.sum())


def lm_loss(logits: Tensor, targets: np.ndarray, target_mask: np.ndarray,
            per_sentence: bool = False) -> Tensor:
    """Unsmoothed negative log-likelihood of the gold next tokens."""
    return sequence_ce(logits, targets, target_mask, smoothing=0.0,
                       per_sentence=per_sentence)


def label_smoothed_ce(logits: Tensor, targets: np.ndarray, target_mask: np.ndarray,
                      smoothing: float = 0.2) -> Tensor:
    """Cross-entropy against (1-eps) one-hot + eps/|V| uniform targets."""
    return sequence_ce(logits, targets, target_mask, smoothing=smoothing)


def combined_loss(contrastive: Tensor, generation: Tensor, weights: LossWeights) -> Tensor:
    """Weighted sum of the two pretraining objectives."""
    return weights.contrastive * contrastive + weights.generation * generation
