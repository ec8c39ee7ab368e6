"""Inference throughput in videos per second."""

from __future__ import annotations

import time

import torch

from ..batch import make_batch
from ..feature_io import Corpus
from ..model import MKTN

MODES = ("multi_pair", "single_pair")


def _batches(corpus: Corpus, mode: str, videos_per_batch: int, dtype):
    vids = list(corpus.manifest.videos)
    if mode == "multi_pair":
        return [make_batch(corpus, vids[i:i + videos_per_batch], order="manifest", dtype=dtype)
                for i in range(0, len(vids), videos_per_batch)]
    if mode == "single_pair":
        return [make_batch(corpus, [rec.video_id], [rec.query_id], order="manifest", dtype=dtype)
                for rec in corpus.manifest.entries]
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def bench_vps(model: MKTN, corpus: Corpus, mode: str = "multi_pair", repeats: int = 3,
              warmup: int = 1, videos_per_batch: int = 1, threads: int | None = None) -> float:
    """Best-of-``repeats`` videos/second for grounding every query of the corpus.

    ``multi_pair`` grounds all queries of a video in one pass, encoding the
    video once; ``single_pair`` runs one pass per query and so re-encodes the
    video each time.  Batch construction is excluded from the timing.
    """
    if threads is not None:
        torch.set_num_threads(threads)
    dtype = next(model.parameters()).dtype
    batches = _batches(corpus, mode, videos_per_batch, dtype)
    model.eval()
    for _ in range(warmup):
        for b in batches:
            model.predict(b, topn=1)
    best = float("inf")
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter()
        for b in batches:
            model.predict(b, topn=1)
        best = min(best, time.perf_counter() - t0)
    return corpus.manifest.num_videos / max(best, 1e-12)
