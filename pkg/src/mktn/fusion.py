"""Co-attention fusion, batch alignment losses, and the boundary heads."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import IndexOutOfRange, NonFiniteLoss, NonSquare, ShapeMismatch
from .layers import FeedForward, TransformerBlock, masked_softmax


class CoAttention(nn.Module):
    """Query-guided video features.

    With ``S = V (Q W_S)^T``, ``A = S_r (Q W_S)`` and ``B = S_r S_c^T V``
    (row / column softmax of S); ``[V; A; V*A; V*B]`` is read by a
    bidirectional GRU with ``d/2`` units per direction and mapped to ``d``.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.gru = nn.GRU(4 * cfg.d, cfg.d // 2, batch_first=True, bidirectional=True)
        self.out = nn.Linear(cfg.d, cfg.d)

    def forward(self, V: torch.Tensor, Q: torch.Tensor, W_S: torch.Tensor,
                word_mask: torch.Tensor | None = None) -> torch.Tensor:
        """``V`` is ``[k, N_v, d]`` (or ``[N_v, d]`` shared), ``Q`` is ``[k, N_q, d]``."""
        if Q.dim() == 2:
            Q = Q.unsqueeze(0)
        if V.dim() == 2:
            V = V.unsqueeze(0).expand(Q.shape[0], -1, -1)
        if V.shape[0] != Q.shape[0] or V.shape[-1] != Q.shape[-1]:
            raise ShapeMismatch("V and Q must agree on batch and feature dims")
        QW = Q @ W_S
        S = V @ QW.transpose(-1, -2)
        S_r = masked_softmax(S, None if word_mask is None else word_mask.unsqueeze(-2), dim=-1)
        S_c = torch.softmax(S, dim=-2)
        A = S_r @ QW
        B = S_r @ (S_c.transpose(-1, -2) @ V)
        X = torch.cat([V, A, V * A, V * B], dim=-1)
        H, _ = self.gru(X)
        return self.out(H)


class SpanPredictor(nn.Module):
    """Two encoder blocks then one feed-forward layer each for start and end logits."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(cfg.d, cfg.attention_heads) for _ in range(2))
        self.start = FeedForward(cfg.d, cfg.d, 1)
        self.end = FeedForward(cfg.d, cfg.d, 1)

    def forward(self, F_seq: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns start / end log-probabilities over frames, ``[k, N_v]`` each."""
        h = F_seq
        for block in self.blocks:
            h = block(h)
        return (torch.log_softmax(self.start(h).squeeze(-1), dim=-1),
                torch.log_softmax(self.end(h).squeeze(-1), dim=-1))


class FloatPredictor(nn.Module):
    """Sigmoid-bounded per-frame offsets; read at the coarse boundary frames."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.start = FeedForward(cfg.d, cfg.d, 1)
        self.end = FeedForward(cfg.d, cfg.d, 1)

    def forward(self, F_seq: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return (torch.sigmoid(self.start(F_seq).squeeze(-1)),
                torch.sigmoid(self.end(F_seq).squeeze(-1)))


def rince_loss(S: torch.Tensor, direction: str, tau, alpha, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Robust InfoNCE over a square similarity matrix with matches on the diagonal.

    ``v2q`` sums the negative term along rows (videos -> queries), ``q2v``
    along columns.  ``mask`` (True = keep) removes cells from the sum; the
    diagonal is always kept.
    """
    if S.dim() != 2 or S.shape[0] != S.shape[1]:
        raise NonSquare(f"similarity matrix must be square, got {tuple(S.shape)}")
    E = torch.exp(S)
    if mask is not None:
        keep = mask.bool() | torch.eye(S.shape[0], dtype=torch.bool, device=S.device)
        E = E * keep.to(E.dtype)
    if direction == "v2q":
        neg = E.sum(dim=1)
    elif direction == "q2v":
        neg = E.sum(dim=0)
    else:
        raise ValueError(f"direction must be 'v2q' or 'q2v', got {direction!r}")
    pos = torch.exp(torch.diagonal(S))
    return (-pos / tau + (alpha * neg) ** tau / tau).mean()


def alignment_loss_L1(S_es, S_op, tau, alpha, mask=None, use_es: bool = True, use_op: bool = True):
    total = None
    for S, used in ((S_es, use_es), (S_op, use_op)):
        if not used or S is None:
            continue
        term = rince_loss(S, "v2q", tau, alpha, mask) + rince_loss(S, "q2v", tau, alpha, mask)
        total = term if total is None else total + term
    if total is None:
        ref = S_es if S_es is not None else S_op
        return ref.new_zeros(()) if isinstance(ref, torch.Tensor) else torch.zeros(())
    return total


def decode_spans(P_s, P_e, k: int = 1) -> list[tuple[int, int, float]]:
    """Top-``k`` cells of ``P_s(s) * P_e(e)`` with ``s <= e``.

    Ties go to the smallest ``s`` and then the smallest ``e``.
    """
    P_s = np.asarray(P_s, dtype=np.float64)
    P_e = np.asarray(P_e, dtype=np.float64)
    n = P_s.shape[0]
    joint = np.outer(P_s, P_e)
    joint[np.tril_indices(n, -1)] = -np.inf
    flat = joint.ravel()
    k = min(k, n * (n + 1) // 2)
    if k == 1:
        order = [int(np.argmax(flat))]
    else:
        order = np.argsort(-flat, kind="stable")[:k]
    return [(int(i) // n, int(i) % n, float(flat[i])) for i in order]


def joint_argmax(P_s, P_e) -> tuple[int, int]:
    s, e, _ = decode_spans(P_s, P_e, 1)[0]
    return s, e


def coarse_labels(t_s: torch.Tensor, t_e: torch.Tensor, N_v: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Outward-rounded boundary frames: ``floor(t_s)`` and ``ceil(t_e)``, clipped to the video.

    The fine-boundary formula puts the start in ``[s, s+1]`` and the end in
    ``[e-1, e]``, so outward rounding lets it reach any ground truth.
    """
    s = torch.floor(t_s).long().clamp(0, N_v - 1)
    e = torch.ceil(t_e).long().clamp(0, N_v - 1)
    return s, torch.maximum(s, e)


def span_loss_L2(P_s, P_e, y_s, y_e, log_space: bool = False) -> torch.Tensor:
    """Cross-entropy of both boundary distributions against their label frames, averaged over queries."""
    P_s = torch.as_tensor(P_s)
    P_e = torch.as_tensor(P_e)
    if P_s.dim() == 1:
        P_s, P_e = P_s.unsqueeze(0), P_e.unsqueeze(0)
    y_s = torch.as_tensor(y_s, dtype=torch.long).reshape(-1)
    y_e = torch.as_tensor(y_e, dtype=torch.long).reshape(-1)
    N_v = P_s.shape[-1]
    if bool((y_s >= N_v).any() or (y_e >= N_v).any() or (y_s < 0).any() or (y_e < 0).any()):
        raise IndexOutOfRange(f"label index outside [0, {N_v})")
    log_s = P_s if log_space else torch.log(P_s)
    log_e = P_e if log_space else torch.log(P_e)
    ce_s = -log_s.gather(-1, y_s.unsqueeze(-1)).squeeze(-1)
    ce_e = -log_e.gather(-1, y_e.unsqueeze(-1)).squeeze(-1)
    return (ce_s + ce_e).mean()


def float_loss_L3(s_hat, e_hat, O_s, O_e, t_s, t_e) -> torch.Tensor:
    """Smooth-L1 of the refined boundaries against float ground truth (frame units)."""
    fine_s = s_hat + 1.0 - O_s
    fine_e = e_hat - 1.0 + O_e
    loss = (F.smooth_l1_loss(fine_s, t_s, reduction="none", beta=1.0)
            + F.smooth_l1_loss(fine_e, t_e, reduction="none", beta=1.0))
    return loss.mean()


def combine_boundaries(s_hat, e_hat, O_s, O_e):
    """``(s + 1 - O_s, e - 1 + O_e)``; an inverted result collapses to its midpoint."""
    fine_s = s_hat + 1.0 - O_s
    fine_e = e_hat - 1.0 + O_e
    if isinstance(fine_s, torch.Tensor):
        mid = (fine_s + fine_e) / 2
        bad = fine_s > fine_e
        return torch.where(bad, mid, fine_s), torch.where(bad, mid, fine_e)
    if fine_s > fine_e:
        mid = (fine_s + fine_e) / 2
        return mid, mid
    return fine_s, fine_e


def total_loss(components: Mapping[str, torch.Tensor], cfg: ModelConfig) -> torch.Tensor:
    """``L_CL + lam*L1 + gamma*L2 + mu*L3 + lam_csm*L_csm``; disabled modules contribute nothing."""
    ab = cfg.ablations
    weights = {
        "cl": 1.0 if ab.avm else 0.0,
        "align": cfg.lam,
        "span": cfg.gamma,
        "float": cfg.mu,
        "csm": cfg.lam_csm if ab.csm else 0.0,
    }
    total = None
    for name, w in weights.items():
        if name not in components or w == 0.0:
            continue
        value = components[name]
        if not bool(torch.isfinite(torch.as_tensor(value)).all()):
            raise NonFiniteLoss(name, float(torch.as_tensor(value).detach()))
        term = w * value
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total
