"""The full network: encoders, the four relationship modules, and the grounding head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from . import apa, avm, csm, fusion, opm
from .batch import Batch
from .config import ModelConfig
from .encoders import QueryEncoder, VideoEncoder


@dataclass
class ForwardOutput:
    losses: dict[str, torch.Tensor]
    total: torch.Tensor
    log_p_start: list[torch.Tensor]   # per video, [k, N_v]
    log_p_end: list[torch.Tensor]
    offsets_start: list[torch.Tensor]
    offsets_end: list[torch.Tensor]
    extras: dict = field(default_factory=dict)


@dataclass
class Prediction:
    query_id: str
    candidates: list[tuple[float, float, float]]   # (t_s, t_e, score), frame units
    csm: tuple[float, float] | None = None


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p))) if p < 1.0 else 20.0


class MKTN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.video_encoder = VideoEncoder(cfg)
        self.query_encoder = QueryEncoder(cfg)
        # shared by frame-word similarity and co-attention
        self.W_S = nn.Parameter(torch.eye(d) + 0.02 * torch.randn(d, d))
        self.csm = csm.CSMDecoder(cfg)
        self.shared = avm.SharedProjector(cfg)
        self.visual_weights = opm.SparseWeights(d, cfg.N_a)
        self.text_weights = opm.SparseWeights(d, cfg.N_p)
        self.frame_decoder = apa.FrameDecoder(cfg)
        self.activity_decoder = apa.ActivityDecoder(cfg)
        self.coattention = fusion.CoAttention(cfg)
        self.span = fusion.SpanPredictor(cfg)
        self.floats = fusion.FloatPredictor(cfg)
        if cfg.learnable_rince:
            self.tau_logit = nn.Parameter(torch.tensor(_logit(cfg.tau)))
            self.alpha_logit = nn.Parameter(torch.tensor(_logit(cfg.alpha)))

    def rince_params(self):
        if self.cfg.learnable_rince:
            return torch.sigmoid(self.tau_logit), torch.sigmoid(self.alpha_logit)
        return self.cfg.tau, self.cfg.alpha

    def encode(self, batch: Batch):
        """Encode each video once (videos of equal length share one call) and all queries.

        Returns ``(groups, words, sentences)``; each group is ``(video ids, [b, N_v, C+1, d])``.
        """
        by_len: dict[int, list[int]] = {}
        for v, g in enumerate(batch.grids):
            by_len.setdefault(g.shape[0], []).append(v)
        groups = []
        for members in by_len.values():
            grid = torch.stack([batch.grids[v] for v in members])
            groups.append((members, self.video_encoder(grid)))
        words, sentences = self.query_encoder(batch.words, batch.word_mask)
        return groups, words, sentences

    def ground(self, groups, words, batch: Batch):
        """Co-attention, span and float heads over every pair of each length group."""
        out = {"log_ps": [], "log_pe": [], "O_s": [], "O_e": [], "index": []}
        for members, enc in groups:
            local = {v: n for n, v in enumerate(members)}
            idx = torch.cat([batch.queries_of(v) for v in members])
            if idx.numel() == 0:
                continue
            rows = torch.tensor([local[int(v)] for v in batch.video_index[idx]], dtype=torch.long)
            F_seq = self.coattention(enc[rows, :, 0, :], words[idx], self.W_S, batch.word_mask[idx])
            log_ps, log_pe = self.span(F_seq)
            O_s, O_e = self.floats(F_seq)
            for key, val in zip(("log_ps", "log_pe", "O_s", "O_e", "index"),
                                (log_ps, log_pe, O_s, O_e, idx)):
                out[key].append(val)
        return out

    def forward(self, batch: Batch, phi: float) -> ForwardOutput:
        cfg = self.cfg
        ab = cfg.ablations
        groups, words, sentences = self.encode(batch)
        M = batch.num_pairs
        B = batch.num_videos
        head = self.ground(groups, words, batch)

        span_sum = words.new_zeros(())
        float_sum = words.new_zeros(())
        for log_ps, log_pe, O_s, O_e, idx in zip(head["log_ps"], head["log_pe"], head["O_s"],
                                                 head["O_e"], head["index"]):
            gt = batch.gt[idx]
            y_s, y_e = fusion.coarse_labels(gt[:, 0], gt[:, 1], log_ps.shape[-1])
            span_sum = span_sum + fusion.span_loss_L2(log_ps, log_pe, y_s, y_e, log_space=True) * idx.numel()
            o_s = O_s.gather(1, y_s.unsqueeze(1)).squeeze(1)
            o_e = O_e.gather(1, y_e.unsqueeze(1)).squeeze(1)
            float_sum = float_sum + fusion.float_loss_L3(
                y_s.to(o_s.dtype), y_e.to(o_e.dtype), o_s, o_e, gt[:, 0], gt[:, 1]) * idx.numel()
        losses = {"span": span_sum / M, "float": float_sum / M}
        extras: dict = {}

        def scatter_rows(parts):
            # reassemble per-group [b, M] blocks into batch video order
            rows = [None] * B
            for (members, _), block in zip(groups, parts):
                for n, v in enumerate(members):
                    rows[v] = block[n]
            return torch.stack(rows)

        if ab.avm:
            S_sel = scatter_rows([
                avm.similarity_matrix(enc[:, :, 0, :], words, batch.word_mask, self.W_S,
                                      cfg.selection_similarity)
                for _, enc in groups])
            negatives = avm.select_negatives(S_sel, phi, avm.candidate_mask(B, batch.video_index))
            v_emb = scatter_rows([avm.pool_unit(self.shared.encode(enc[:, :, 0, :])) for _, enc in groups])
            q_emb = avm.pool_unit(self.shared.encode(words, batch.word_mask), batch.word_mask)
            margin = phi if cfg.cl_margin is None else cfg.cl_margin
            losses["cl"] = avm.contrastive_loss(v_emb, q_emb, batch.video_index, negatives,
                                                margin, cfg.theta_mode)
            extras["negatives"] = negatives
            extras["S_sel"] = S_sel

        if ab.opm or ab.apa:
            P_a = [opm.appearance_prototypes(enc, self.visual_weights(enc)) for _, enc in groups]
            pair_keep = batch.video_index.unsqueeze(1) != batch.video_index.unsqueeze(0)
            mask = pair_keep if cfg.mask_same_video else None
            tau, alpha = self.rince_params()
            S_op = S_es = None
            if ab.opm:
                W_p = self.text_weights(words, batch.word_mask)
                P_p = opm.phrase_prototypes(words, W_p)
                S_op = scatter_rows([opm.object_phrase_matrix(pa, P_p) for pa in P_a])[batch.video_index]
            if ab.apa:
                Q_e = sentences if cfg.activity_query_mode == "sentences" else None
                blocks = []
                for (_, enc), pa in zip(groups, P_a):
                    P_f = self.frame_decoder(pa, enc[:, :, 0, :])
                    blocks.append(apa.activity_sentence_matrix(self.activity_decoder(P_f, Q_e), sentences))
                S_es = scatter_rows(blocks)[batch.video_index]
            losses["align"] = fusion.alignment_loss_L1(S_es, S_op, tau, alpha, mask,
                                                       use_es=ab.apa, use_op=ab.opm)
            extras["S_op"], extras["S_es"] = S_op, S_es

        if ab.csm:
            memory, mem_mask = self._memory(groups, words, sentences, batch)
            pred = self.csm(sentences, batch.ranks, memory, mem_mask)
            losses["csm"] = csm.csm_loss(pred, batch.gt)
            extras["csm_pred"] = pred

        total = fusion.total_loss(losses, cfg)
        return ForwardOutput(losses, total, head["log_ps"], head["log_pe"], head["O_s"], head["O_e"], extras)

    @staticmethod
    def _memory(groups, words, sentences, batch: Batch):
        frames = [None] * batch.num_videos
        for members, enc in groups:
            for n, v in enumerate(members):
                frames[v] = enc[n, :, 0, :]
        return csm.build_memory([frames[int(v)] for v in batch.video_index],
                                words, batch.word_mask, sentences)

    @torch.no_grad()
    def predict(self, batch: Batch, topn: int = 1, with_csm: bool = False) -> list[Prediction]:
        groups, words, sentences = self.encode(batch)
        head = self.ground(groups, words, batch)
        preds: dict[int, Prediction] = {}
        for log_ps, log_pe, O_s, O_e, idx in zip(head["log_ps"], head["log_pe"], head["O_s"],
                                                 head["O_e"], head["index"]):
            P_s = log_ps.exp().double().numpy()
            P_e = log_pe.exp().double().numpy()
            O_s_np = O_s.double().numpy()
            O_e_np = O_e.double().numpy()
            for row, j in enumerate(idx.tolist()):
                cands = []
                for s, e, score in fusion.decode_spans(P_s[row], P_e[row], topn):
                    fs, fe = fusion.combine_boundaries(float(s), float(e), O_s_np[row, s], O_e_np[row, e])
                    cands.append((float(fs), float(fe), score))
                preds[j] = Prediction(batch.query_ids[j], cands)
        if with_csm and self.cfg.ablations.csm:
            memory, mem_mask = self._memory(groups, words, sentences, batch)
            ts = self.csm(sentences, batch.ranks, memory, mem_mask).double().numpy()
            for j, p in preds.items():
                p.csm = (float(ts[j, 0]), float(ts[j, 1]))
        return [preds[j] for j in range(batch.num_pairs)]
