"""Attention and feed-forward building blocks shared by the modules."""

from __future__ import annotations

import math
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F


def sinusoid_table(n: int, d: int, dtype=torch.float32) -> torch.Tensor:
    """``[n, d]`` table with sin on even and cos on odd columns."""
    pos = torch.arange(n, dtype=torch.float64).unsqueeze(1)
    i = torch.arange(0, d, 2, dtype=torch.float64)
    freq = torch.pow(10000.0, -i / d)
    table = torch.zeros(n, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: d // 2])
    return table.to(dtype)


def masked_softmax(scores: torch.Tensor, key_mask: Optional[torch.Tensor], dim: int = -1) -> torch.Tensor:
    """Softmax that gives exactly zero weight where ``key_mask`` is False."""
    if key_mask is not None:
        scores = scores.masked_fill(~key_mask, float("-inf"))
    return torch.softmax(scores, dim=dim)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with ``heads`` heads and an output map.

    ``key_mask`` is boolean ``[..., L_k]`` (True = attend); ``attn_bias`` is
    an additive ``[L_q, L_k]`` term (e.g. a block mask of 0 / -inf).
    """

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError("d must be divisible by heads")
        self.d = d
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, query, key=None, value=None, key_mask=None, attn_bias=None):
        key = query if key is None else key
        value = key if value is None else value
        *batch, lq, d = query.shape
        lk = key.shape[-2]
        h, dh = self.heads, d // self.heads
        q = self.q(query).reshape(*batch, lq, h, dh).transpose(-2, -3)
        k = self.k(key).reshape(*batch, lk, h, dh).transpose(-2, -3)
        v = self.v(value).reshape(*batch, lk, h, dh).transpose(-2, -3)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if attn_bias is not None:
            scores = scores + attn_bias
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[..., None, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(-2, -3).reshape(*batch, lq, d)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, d_hidden)
        self.fc2 = nn.Linear(d_hidden, d_out)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm encoder block: ``x + attn(ln(x))`` then ``x + ffn(ln(x))``."""

    def __init__(self, d: int, heads: int, ffn_mult: int = 2):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, ffn_mult * d, d)

    def forward(self, x, key_mask=None):
        h = self.ln1(x)
        x = x + self.attn(h, key_mask=key_mask)
        return x + self.ffn(self.ln2(x))


def first_max(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Max along ``dim`` whose gradient goes to the lowest-index maximiser on ties."""
    idx = torch.argmax(x, dim=dim, keepdim=True)
    return torch.gather(x, dim, idx).squeeze(dim)
