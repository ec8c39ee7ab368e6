"""Adaptive video-query matching.

Frame-word similarity drives a thresholded negative selection whose
threshold is annealed over training; the surviving negatives feed a
self-weighted hinge contrast between video and query embeddings projected
into a shared, L2-normalised subspace.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ShapeMismatch
from .layers import TransformerBlock

THETA_CLAMP = (0.05, 0.95)


def threshold_schedule(r: float, cfg: ModelConfig) -> float:
    """Threshold at training progress ``r`` in [0, 1].

    ``half_cosine`` rises from ``phi_initial`` to ``phi_final``; ``literal``
    evaluates ``phi_f - (phi_f - phi_i) * cos(r*pi + 1)`` as written, which
    misses both endpoints and is not monotone.
    """
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"r must lie in [0, 1], got {r}")
    lo, hi = cfg.phi_initial, cfg.phi_final
    if cfg.schedule_mode == "literal":
        return hi - (hi - lo) * math.cos(r * math.pi + 1.0)
    # lo + w*(hi - lo) rather than hi - ...: exact at r=0, and the min keeps r=1 exact
    w = (1.0 - math.cos(r * math.pi)) / 2.0
    return min(lo + (hi - lo) * w, hi)


def frame_word_scores(frames: torch.Tensor, words: torch.Tensor, W_S: torch.Tensor,
                      mode: str = "dot") -> torch.Tensor:
    """``[..., N_v, N_q]`` matrix ``V (Q W_S)^T``; ``cosine`` normalises rows first."""
    proj = words @ W_S
    if mode == "cosine":
        frames = F.normalize(frames, dim=-1)
        proj = F.normalize(proj, dim=-1)
    return frames @ proj.transpose(-1, -2)


def pairwise_similarity(frames: torch.Tensor, words: torch.Tensor, W_S: torch.Tensor,
                        mode: str = "dot") -> torch.Tensor:
    """Scalar video-query score: max over all frame-word entries."""
    if frames.shape[-1] != words.shape[-1] or W_S.shape != (words.shape[-1], words.shape[-1]):
        raise ShapeMismatch("frames, words and W_S must share the feature dimension")
    return frame_word_scores(frames, words, W_S, mode).amax(dim=(-1, -2))


def similarity_matrix(frames: torch.Tensor, words: torch.Tensor, word_mask: torch.Tensor,
                      W_S: torch.Tensor, mode: str = "dot") -> torch.Tensor:
    """``[B_v, M]`` scores for every (video, query) combination in a batch.

    ``frames`` is ``[B_v, N_v, d]``, ``words`` ``[M, L, d]`` with ``word_mask``.
    """
    s = frame_word_scores(frames.unsqueeze(1), words.unsqueeze(0), W_S, mode)  # [B_v, M, N_v, L]
    s = s.masked_fill(~word_mask[None, :, None, :], float("-inf"))
    return s.amax(dim=(-1, -2))


@dataclass
class NegativeSet:
    """``mask[i, j]``: video i kept as a negative for query j.

    ``empty[j]`` flags queries with no surviving negative this step; their
    contrast terms are skipped.
    """

    mask: torch.Tensor
    empty: torch.Tensor

    def for_query(self, j: int) -> list[int]:
        return torch.nonzero(self.mask[:, j]).flatten().tolist()


def select_negatives(S: torch.Tensor, phi: float, candidates: torch.Tensor) -> NegativeSet:
    """Keep candidate negatives whose score is strictly below ``phi``.

    Scores at or above the threshold are treated as likely false negatives.
    """
    if S.shape != candidates.shape:
        raise ShapeMismatch("scores and candidate mask must have the same shape")
    mask = (S.detach() < phi) & candidates.bool()
    return NegativeSet(mask=mask, empty=~mask.any(dim=0))


def candidate_mask(num_videos: int, video_index: torch.Tensor) -> torch.Tensor:
    """Original negative set: every batch video except the query's own."""
    rows = torch.arange(num_videos, device=video_index.device).unsqueeze(1)
    return rows != video_index.unsqueeze(0)


@dataclass
class SharedEmbeddings:
    words: torch.Tensor
    frames: torch.Tensor


class SharedProjector(nn.Module):
    """One encoder block shared by both modalities, then row-wise L2 norm."""

    def __init__(self, cfg: ModelConfig | None = None, block: nn.Module | None = None):
        super().__init__()
        if block is None:
            block = TransformerBlock(cfg.d, cfg.attention_heads)
        self.block = block

    def encode(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if isinstance(self.block, TransformerBlock):
            h = self.block(x, key_mask=mask)
        else:
            h = self.block(x)
        return F.normalize(h, dim=-1, eps=1e-12)

    def forward(self, F_w: torch.Tensor, F_v: torch.Tensor, word_mask=None) -> SharedEmbeddings:
        if F_w.shape[-1] != F_v.shape[-1]:
            raise ShapeMismatch("word and frame features must share d")
        return SharedEmbeddings(self.encode(F_w, word_mask), self.encode(F_v))


def pool_unit(x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean over rows (respecting ``mask``), renormalised to unit length."""
    if mask is None:
        pooled = x.mean(dim=-2)
    else:
        m = mask.to(x.dtype).unsqueeze(-1)
        pooled = (x * m).sum(dim=-2) / m.sum(dim=-2).clamp_min(1.0)
    return F.normalize(pooled, dim=-1, eps=1e-12)


def theta_from_margins(m_w: float, m_v: float) -> float:
    """Solve ``theta / (1 - theta) = m_w^2 / m_v^2`` and clamp."""
    a, b = m_w * m_w, m_v * m_v
    if a + b == 0:
        return 0.5
    theta = a / (a + b)
    return min(max(theta, THETA_CLAMP[0]), THETA_CLAMP[1])


def balance_theta(pos_v, pos_w, neg_w, neg_v, mode: str = "fixed_half") -> float:
    """Weight between query-negative and video-negative hinge terms.

    ``fixed_half`` is what the printed ratio reduces to (its numerator and
    denominator coincide).  ``margin_ratio`` compares the mean distance
    margin on the query side with the one on the video side.
    """
    if mode == "fixed_half":
        return 0.5
    pos_v, pos_w = torch.as_tensor(pos_v), torch.as_tensor(pos_w)
    neg_w = torch.as_tensor(neg_w).reshape(-1, pos_v.shape[-1])
    neg_v = torch.as_tensor(neg_v).reshape(-1, pos_v.shape[-1])
    if neg_w.shape[0] == 0 or neg_v.shape[0] == 0:
        return 0.5
    d_pos = torch.linalg.vector_norm(pos_v - pos_w)
    m_w = (torch.linalg.vector_norm(pos_v - neg_w, dim=-1) - d_pos).mean()
    m_v = (torch.linalg.vector_norm(pos_w - neg_v, dim=-1) - d_pos).mean()
    return theta_from_margins(float(m_w), float(m_v))


def contrastive_loss(video_emb: torch.Tensor, query_emb: torch.Tensor, video_index: torch.Tensor,
                     negatives: NegativeSet, margin: float, theta_mode: str = "fixed_half") -> torch.Tensor:
    """Self-weighted hinge contrast averaged over positive pairs.

    ``video_emb`` is ``[B_v, d]`` and ``query_emb`` ``[M, d]``, both unit rows.
    For pair (i, j): query negatives are queries j' with ``mask[i, j']`` and
    video negatives are videos i' with ``mask[i', j]``.
    """
    S = video_emb @ query_emb.T                       # [B_v, M]
    M = query_emb.shape[0]
    cols = torch.arange(M, device=S.device)
    s_pos = S[video_index, cols]                       # [M]
    neg_q = negatives.mask[video_index].to(S.dtype)    # [M, M]: row j -> negatives of its video
    neg_v = negatives.mask.T.to(S.dtype)               # [M, B_v]
    term_w = (F.relu(margin - s_pos[:, None] + S[video_index]) * neg_q).sum(-1)
    term_v = (F.relu(margin - s_pos[:, None] + S.T) * neg_v).sum(-1)
    theta = batch_theta(S, s_pos, neg_q, neg_v, video_index, theta_mode)
    return (theta * term_w + (1.0 - theta) * term_v).sum() / max(M, 1)


def batch_theta(S, s_pos, neg_q, neg_v, video_index, mode: str) -> torch.Tensor:
    """Per-pair ``balance_theta`` from unit-vector cosines (``|a-b| = sqrt(2 - 2cos)``)."""
    if mode == "fixed_half":
        return torch.full_like(s_pos, 0.5)
    dist = lambda c: torch.sqrt((2.0 - 2.0 * c).clamp_min(1e-12))
    d_pos = dist(s_pos)
    n_q, n_v = neg_q.sum(-1), neg_v.sum(-1)
    m_w = ((dist(S[video_index]) - d_pos[:, None]) * neg_q).sum(-1) / n_q.clamp_min(1.0)
    m_v = ((dist(S.T) - d_pos[:, None]) * neg_v).sum(-1) / n_v.clamp_min(1.0)
    a, b = m_w ** 2, m_v ** 2
    denom = a + b
    theta = torch.where(denom > 0, a / torch.where(denom > 0, denom, torch.ones_like(denom)),
                        torch.full_like(a, 0.5))
    theta = theta.clamp(*THETA_CLAMP)
    return torch.where((n_q > 0) & (n_v > 0) & (denom > 0), theta, torch.full_like(theta, 0.5))
