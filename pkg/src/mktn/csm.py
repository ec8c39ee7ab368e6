"""Cross-sentence semantic mining: queries attend to each other, then to their own memory."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import ShapeMismatch
from .layers import FeedForward, MultiHeadAttention, sinusoid_table


def position_embed(F_q: torch.Tensor, ranks: torch.Tensor) -> torch.Tensor:
    """Add the sinusoid encoding of each row's rank in the query ordering."""
    ranks = torch.as_tensor(ranks, dtype=torch.long)
    n = int(ranks.max()) + 1 if ranks.numel() else 0
    table = sinusoid_table(n, F_q.shape[-1], dtype=F_q.dtype).to(F_q.device)
    return F_q + table[ranks]


def build_memory(frames: list[torch.Tensor], words: torch.Tensor, word_mask: torch.Tensor,
                 sentences: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-query memory ``[frames ; words ; sentence]`` padded to a common length.

    ``frames[j]`` is the ``[N_v, d]`` global-slot sequence of query j's video.
    Returns ``(memory [M, L, d], mask [M, L])``.
    """
    M = words.shape[0]
    lengths = [f.shape[0] + int(word_mask[j].sum()) + 1 for j, f in enumerate(frames)]
    L = max(lengths)
    rows = []
    mask = torch.zeros(M, L, dtype=torch.bool, device=words.device)
    for j, f in enumerate(frames):
        w = words[j][word_mask[j]]
        mem = torch.cat([f, w, sentences[j:j + 1]], dim=0)
        pad = L - mem.shape[0]
        if pad:
            mem = torch.cat([mem, mem.new_zeros(pad, mem.shape[1])], dim=0)
        rows.append(mem)
        mask[j, :lengths[j]] = True
    return torch.stack(rows), mask


class CSMDecoder(nn.Module):
    """Position embed -> self-attention over queries -> cross-attention into memory -> regressor."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.self_attn = MultiHeadAttention(cfg.d, cfg.attention_heads)
        self.cross_attn = MultiHeadAttention(cfg.d, cfg.attention_heads)
        self.regressor = FeedForward(cfg.d, cfg.d, 2)

    def forward(self, F_q: torch.Tensor, ranks: torch.Tensor, memory: torch.Tensor,
                memory_mask: torch.Tensor | None = None) -> torch.Tensor:
        if F_q.dim() != 2 or memory.dim() != 3 or memory.shape[0] != F_q.shape[0]:
            raise ShapeMismatch("CSM expects F_q [M, d] and memory [M, L, d]")
        x = position_embed(F_q, ranks)
        x = x + self.self_attn(x)
        # each query only sees its own pair's memory
        x = x + self.cross_attn(x.unsqueeze(1), memory, key_mask=memory_mask).squeeze(1)
        return self.regressor(x)


def csm_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 (beta 1 frame) summed over both boundaries, averaged over queries."""
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
    return F.smooth_l1_loss(pred, gt, reduction="none", beta=1.0).sum(-1).mean()
