"""Activity-sentence prototype alignment.

Object prototypes of each frame are folded into one frame prototype by a
block-masked attention, frame prototypes are read by a small set of
activity queries, and the sentence vector is matched to its closest
activity prototype.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ShapeMismatch
from .layers import first_max


def build_frame_mask(N_v: int, N_a: int, dtype=torch.float32) -> torch.Tensor:
    """``[N_v, N_v*N_a]`` mask: 0 on frame i's own prototype block, -inf elsewhere."""
    if N_v < 1 or N_a < 1:
        raise ValueError("N_v and N_a must be >= 1")
    cols = torch.arange(N_v * N_a)
    rows = torch.arange(N_v).unsqueeze(1)
    own = (cols >= N_a * rows) & (cols < N_a * (rows + 1))
    mask = torch.full((N_v, N_v * N_a), float("-inf"), dtype=dtype)
    return mask.masked_fill(own, 0.0)


def masked_attention(Q: torch.Tensor, K: torch.Tensor, V: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """``Q + softmax(Q K^T + mask) V`` (unscaled, as in the frame decoder)."""
    return Q + torch.softmax(Q @ K.transpose(-1, -2) + mask, dim=-1) @ V


class FrameDecoder(nn.Module):
    """Each frame query attends only to the object prototypes of its own frame.

    The result is averaged with the frame's global feature.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.frame_queries = nn.Parameter(torch.randn(cfg.max_frames, cfg.d) * 0.1)
        self.key = nn.Linear(cfg.d, cfg.d)
        self.value = nn.Linear(cfg.d, cfg.d)

    def forward(self, P_a: torch.Tensor, v_C: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``P_a`` is ``[..., N_v, N_a, d]`` or flattened ``[..., N_v*N_a, d]``; ``v_C`` is ``[..., N_v, d]``.

        Returns frame prototypes ``[..., N_v, d]``.
        """
        N_v = v_C.shape[-2]
        if N_v > self.cfg.max_frames:
            raise ShapeMismatch(f"{N_v} frames exceeds max_frames={self.cfg.max_frames}")
        if P_a.dim() == v_C.dim() + 1:
            flat = P_a.reshape(*P_a.shape[:-3], -1, P_a.shape[-1])
        else:
            flat = P_a
        if flat.shape[-2] % N_v:
            raise ShapeMismatch("object prototype count must be a multiple of N_v")
        N_a = flat.shape[-2] // N_v
        if mask is None:
            mask = build_frame_mask(N_v, N_a, dtype=flat.dtype).to(flat.device)
        if mask.shape != (N_v, N_v * N_a):
            raise ShapeMismatch(f"mask must be [{N_v}, {N_v * N_a}]")
        Q_f = self.frame_queries[:N_v]
        P_f = masked_attention(Q_f, self.key(flat), self.value(flat), mask)
        return (P_f + v_C) / 2


class ActivityDecoder(nn.Module):
    """Unmasked attention of activity queries over frame prototypes, residual on the queries."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.activity_queries = nn.Parameter(torch.randn(cfg.activity_queries, cfg.d) * 0.1)
        self.key = nn.Linear(cfg.d, cfg.d)
        self.value = nn.Linear(cfg.d, cfg.d)

    def forward(self, P_f: torch.Tensor, Q_e: torch.Tensor | None = None) -> torch.Tensor:
        if Q_e is None:
            Q_e = self.activity_queries
        if Q_e.shape[-1] != P_f.shape[-1]:
            raise ShapeMismatch("activity queries and frame prototypes must share d")
        return Q_e + torch.softmax(Q_e @ self.key(P_f).transpose(-1, -2), dim=-1) @ self.value(P_f)


def activity_sentence_similarity(q_e: torch.Tensor, P_e: torch.Tensor) -> torch.Tensor:
    """Best cosine between the sentence vector and any activity prototype."""
    sims = F.normalize(P_e, dim=-1, eps=1e-12) @ F.normalize(q_e, dim=-1, eps=1e-12)
    return first_max(sims, -1)


def activity_sentence_matrix(P_e: torch.Tensor, q_e: torch.Tensor) -> torch.Tensor:
    """``[B_v, M]`` scores; ``P_e`` is ``[B_v, K_e, d]`` and ``q_e`` is ``[M, d]``."""
    q = F.normalize(q_e, dim=-1, eps=1e-12)
    p = F.normalize(P_e, dim=-1, eps=1e-12)
    return first_max(torch.einsum("md,bkd->bmk", q, p), -1)
