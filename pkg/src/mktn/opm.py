"""Object-phrase prototype matching."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch
from .layers import first_max


class SparseWeights(nn.Module):
    """Three affine layers, each followed by ReLU, predicting ``[K_in, K_out]`` weights.

    Columns whose sum is positive are renormalised to sum to one; all-zero
    columns stay zero.
    """

    def __init__(self, d: int, k_out: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(d, 16)
        self.d = d
        self.k_out = k_out
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, k_out)
        # a small positive output bias keeps columns from starting out all zero
        nn.init.constant_(self.fc3.bias, 0.05)

    def forward(self, rows: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        if rows.shape[-1] != self.d or rows.shape[-2] < 1:
            raise ShapeMismatch(f"rows must be [..., K_in>=1, {self.d}]")
        w = F.relu(self.fc3(F.relu(self.fc2(F.relu(self.fc1(rows))))))
        if mask is not None:
            w = w * mask.to(w.dtype).unsqueeze(-1)
        col = w.sum(dim=-2, keepdim=True)
        return torch.where(col > 0, w / torch.where(col > 0, col, torch.ones_like(col)), w)


def appearance_prototypes(frame: torch.Tensor, W_a: torch.Tensor) -> torch.Tensor:
    """``W_a^T frame``: ``[..., C+1, N_a]`` weights over ``[..., C+1, d]`` slots -> ``[..., N_a, d]``."""
    if frame.shape[-2] != W_a.shape[-2]:
        raise ShapeMismatch("weight rows must match slot count")
    return W_a.transpose(-1, -2) @ frame


def phrase_prototypes(words: torch.Tensor, W_p: torch.Tensor) -> torch.Tensor:
    """``W_p^T words``: ``[..., N_q, N_p]`` weights over ``[..., N_q, d]`` -> ``[..., N_p, d]``."""
    if words.shape[-2] != W_p.shape[-2]:
        raise ShapeMismatch("weight rows must match word count")
    return W_p.transpose(-1, -2) @ words


def object_phrase_similarity(P_a: torch.Tensor, P_p: torch.Tensor) -> torch.Tensor:
    """Mean over object prototypes of the best match across frames and phrases.

    ``P_a`` is ``[N_v, N_a, d]`` and ``P_p`` is ``[N_p, d]``; both are unit
    normalised here, so the result lies in [-1, 1].
    """
    a = F.normalize(P_a, dim=-1, eps=1e-12)
    p = F.normalize(P_p, dim=-1, eps=1e-12)
    sims = torch.einsum("ild,jd->ilj", a, p)
    return first_max(first_max(sims, 2), 0).mean()


def object_phrase_matrix(P_a: torch.Tensor, P_p: torch.Tensor) -> torch.Tensor:
    """``[B_v, M]`` object-phrase scores; ``P_a`` is ``[B_v, N_v, N_a, d]``, ``P_p`` is ``[M, N_p, d]``."""
    a = F.normalize(P_a, dim=-1, eps=1e-12)
    p = F.normalize(P_p, dim=-1, eps=1e-12)
    sims = torch.einsum("bild,mjd->bmilj", a, p)
    return first_max(first_max(sims, 4), 2).mean(dim=-1)
