"""R@n, IoU=m evaluation and prediction export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from ..batch import make_batch
from ..feature_io import Corpus, iou_matrix
from ..model import MKTN, Prediction


@dataclass
class EvalReport:
    recall: dict[tuple[int, float], float]
    num_queries: int
    num_videos: int
    csm_recall: dict[float, float] = field(default_factory=dict)
    vps: dict[str, float] = field(default_factory=dict)

    def key(self, n: int, m: float) -> str:
        return f"R@{n},IoU={m:g}"

    def to_json(self) -> dict:
        return {
            "recall": {self.key(n, m): v for (n, m), v in sorted(self.recall.items())},
            "csm_recall": {f"R@1,IoU={m:g}": v for m, v in sorted(self.csm_recall.items())},
            "num_queries": self.num_queries,
            "num_videos": self.num_videos,
            "vps": self.vps,
        }


def recall_at(candidates: Sequence[Sequence[tuple[float, float]]], gt: Sequence[tuple[float, float]],
              n: int, m: float) -> float:
    """Fraction of queries whose top-``n`` candidates include one with IoU >= ``m``."""
    if not gt:
        return 0.0
    hits = 0
    for cands, g in zip(candidates, gt):
        top = np.asarray([c[:2] for c in cands[:n]], dtype=np.float64).reshape(-1, 2)
        if top.size and (iou_matrix(top, np.asarray(g, dtype=np.float64)) >= m).any():
            hits += 1
    return hits / len(gt)


def predict_corpus(model: MKTN, corpus: Corpus, topn: int = 5, videos_per_batch: int = 8,
                   with_csm: bool = False) -> list[Prediction]:
    dtype = next(model.parameters()).dtype
    vids = list(corpus.manifest.videos)
    preds: dict[str, Prediction] = {}
    model.eval()
    for i in range(0, len(vids), videos_per_batch):
        batch = make_batch(corpus, vids[i:i + videos_per_batch], order="manifest", dtype=dtype)
        for p in model.predict(batch, topn, with_csm=with_csm):
            preds[p.query_id] = p
    return [preds[r.query_id] for r in corpus.manifest.entries]


def evaluate(model: MKTN, corpus: Corpus, topn: Iterable[int] = (1, 5),
             ious: Iterable[float] = (0.3, 0.5, 0.7), videos_per_batch: int = 8,
             predictions: list[Prediction] | None = None) -> EvalReport:
    topn = sorted(set(topn))
    ious = sorted(set(ious))
    if predictions is None:
        predictions = predict_corpus(model, corpus, max(topn), videos_per_batch,
                                     with_csm=model.cfg.ablations.csm)
    gt = [corpus.gt_frames(r) for r in corpus.manifest.entries]
    cands = [p.candidates for p in predictions]
    recall = {(n, m): recall_at(cands, gt, n, m) for n in topn for m in ious}
    csm_recall = {}
    if all(p.csm is not None for p in predictions):
        csm_cands = [[tuple(sorted(p.csm))] for p in predictions]
        csm_recall = {m: recall_at(csm_cands, gt, 1, m) for m in ious}
    return EvalReport(recall, len(gt), corpus.manifest.num_videos, csm_recall)


def write_predictions(predictions: list[Prediction], corpus: Corpus, path: str | Path) -> None:
    """JSON lines: best span per query in frame units and seconds."""
    fps = corpus.manifest.frames_per_second
    with open(path, "w") as fh:
        for p in predictions:
            t_s, t_e, score = p.candidates[0]
            fh.write(json.dumps({
                "query_id": p.query_id,
                "t_s": t_s, "t_e": t_e, "score": score,
                "t_s_seconds": t_s / fps, "t_e_seconds": t_e / fps,
            }) + "\n")


def random_span_baseline(corpus: Corpus, m: float = 0.5, samples: int = 20000, seed: int = 0) -> float:
    """Monte-Carlo R@1,IoU=m of spans with two uniform endpoints on each video's frame axis."""
    rng = np.random.default_rng(seed)
    rates = []
    for rec in corpus.manifest.entries:
        g = np.asarray(corpus.gt_frames(rec))
        pts = np.sort(rng.uniform(0.0, rec.num_frames - 1, size=(samples, 2)), axis=1)
        rates.append(float((iou_matrix(pts, g) >= m).mean()))
    return float(np.mean(rates))
