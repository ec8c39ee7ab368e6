"""Multi-pair batches: every query of a video travels with that video."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .feature_io import Corpus


@dataclass
class Batch:
    video_ids: list[str]
    grids: list[torch.Tensor]      # each [N_v, C+1, d]
    query_ids: list[str]
    words: torch.Tensor            # [M, L, d], zero padded
    word_mask: torch.Tensor        # [M, L]
    video_index: torch.Tensor      # [M] index into grids
    gt: torch.Tensor               # [M, 2] frame units
    ranks: torch.Tensor            # [M] position in the query ordering

    @property
    def num_pairs(self) -> int:
        return len(self.query_ids)

    @property
    def num_videos(self) -> int:
        return len(self.video_ids)

    def queries_of(self, v: int) -> torch.Tensor:
        return torch.nonzero(self.video_index == v).flatten()

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch(self.video_ids, [g.to(dtype) for g in self.grids], self.query_ids,
                     self.words.to(dtype), self.word_mask, self.video_index,
                     self.gt.to(dtype), self.ranks)


def make_batch(corpus: Corpus, video_ids: Sequence[str], query_ids: Sequence[str] | None = None,
               order: str = "start_time", dtype: torch.dtype = torch.float32) -> Batch:
    """Collect ``video_ids`` and their queries (optionally restricted to ``query_ids``).

    Query ranks follow the video order across videos and, within a video,
    ground-truth start time (``order="start_time"``) or manifest order
    (``order="manifest"``).
    """
    groups = corpus.queries_by_video()
    wanted = None if query_ids is None else set(query_ids)
    grids, recs, vindex = [], [], []
    for v, vid in enumerate(video_ids):
        grids.append(torch.as_tensor(np.asarray(corpus.videos[vid]), dtype=dtype))
        for rec in groups[vid]:
            if wanted is None or rec.query_id in wanted:
                recs.append(rec)
                vindex.append(v)
    if not recs:
        raise ValueError("batch has no queries")
    d = corpus.manifest.d
    L = max(r.num_words for r in recs)
    words = torch.zeros(len(recs), L, d, dtype=dtype)
    mask = torch.zeros(len(recs), L, dtype=torch.bool)
    gt = torch.zeros(len(recs), 2, dtype=dtype)
    for j, rec in enumerate(recs):
        w = torch.as_tensor(np.asarray(corpus.queries[rec.query_id]), dtype=dtype)
        words[j, : w.shape[0]] = w
        mask[j, : w.shape[0]] = True
        gt[j, 0], gt[j, 1] = corpus.gt_frames(rec)

    ranks = torch.zeros(len(recs), dtype=torch.long)
    next_rank = 0
    vindex_t = torch.tensor(vindex, dtype=torch.long)
    for v in range(len(video_ids)):
        members = [j for j in range(len(recs)) if vindex[j] == v]
        if order == "start_time":
            members.sort(key=lambda j: (float(gt[j, 0]), j))
        elif order != "manifest":
            raise ValueError(f"unknown order {order!r}")
        for j in members:
            ranks[j] = next_rank
            next_rank += 1

    return Batch(list(video_ids), grids, [r.query_id for r in recs], words, mask,
                 vindex_t, gt, ranks)
