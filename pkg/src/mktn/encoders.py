"""Feature refiners applied on top of the loaded video and word features."""

from __future__ import annotations

import torch
import torch.nn as nn

from .config import ModelConfig
from .errors import ShapeMismatch
from .layers import MultiHeadAttention


class VideoEncoder(nn.Module):
    """Self-attention over the frame axis of the global slots.

    Global slots get ``x + MHA(x)`` per layer; patch slots get a pointwise
    residual projection, so the patch axis stays permutation-equivariant.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(
            MultiHeadAttention(cfg.d, cfg.attention_heads) for _ in range(cfg.video_layers)
        )
        self.patch_proj = nn.Linear(cfg.d, cfg.d)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        """``grid`` is ``[..., N_v, C+1, d]``; leading dims are independent videos."""
        if grid.dim() < 3 or grid.shape[-2] != self.cfg.C + 1 or grid.shape[-1] != self.cfg.d:
            raise ShapeMismatch(
                f"video grid must be [..., N_v, {self.cfg.C + 1}, {self.cfg.d}], got {tuple(grid.shape)}"
            )
        g = grid[..., 0, :]
        for attn in self.layers:
            g = g + attn(g)
        patches = grid[..., 1:, :]
        patches = patches + self.patch_proj(patches)
        return torch.cat([g.unsqueeze(-2), patches], dim=-2)


class QueryEncoder(nn.Module):
    """Affine word map; the sentence vector is an affine map of the word mean."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.word_map = nn.Linear(cfg.d, cfg.d)
        self.sentence_map = nn.Linear(cfg.d, cfg.d)

    def forward(self, words: torch.Tensor, mask: torch.Tensor | None = None):
        """``words`` is ``[..., N_q, d]``; ``mask`` marks real (non-padding) words.

        Returns ``(mapped_words, sentence)``.
        """
        if words.shape[-1] != self.cfg.d or words.shape[-2] < 1:
            raise ShapeMismatch(f"words must be [..., N_q>=1, {self.cfg.d}], got {tuple(words.shape)}")
        mapped = self.word_map(words)
        if mask is None:
            pooled = mapped.mean(dim=-2)
        else:
            m = mask.to(mapped.dtype).unsqueeze(-1)
            pooled = (mapped * m).sum(dim=-2) / m.sum(dim=-2).clamp_min(1.0)
        return mapped, self.sentence_map(pooled)
