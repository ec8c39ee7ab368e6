"""Training loop over multi-pair batches."""

from __future__ import annotations

import logging
import zlib
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..avm import threshold_schedule
from ..batch import make_batch
from ..config import ModelConfig
from ..feature_io import Corpus
from ..model import MKTN

log = logging.getLogger(__name__)

STREAMS = ("corpus", "init", "shuffle")


def stream_seed(seed: int, name: str) -> int:
    """Independent 32-bit seed for the named random stream."""
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1)[0])


@contextmanager
def seeded_torch(seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def build_model(cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> MKTN:
    with seeded_torch(stream_seed(seed, "init")):
        model = MKTN(cfg)
    return model.to(dtype)


@dataclass
class TrainResult:
    model: MKTN
    loss_curve: list[dict[str, float]] = field(default_factory=list)

    @property
    def totals(self) -> list[float]:
        return [row["total"] for row in self.loss_curve]


class BatchSampler:
    """Epochs of shuffled videos cut into groups of ``videos_per_batch``."""

    def __init__(self, video_ids: list[str], videos_per_batch: int, seed: int, shuffle: bool = True):
        self.video_ids = list(video_ids)
        self.size = max(2, min(videos_per_batch, len(self.video_ids)))
        self.rng = np.random.default_rng(stream_seed(seed, "shuffle"))
        self.shuffle = shuffle
        self._queue: list[str] = []

    def next(self) -> list[str]:
        if len(self._queue) < self.size:
            order = list(self.video_ids)
            if self.shuffle:
                order = [order[i] for i in self.rng.permutation(len(order))]
            self._queue.extend(order)
        out, self._queue = self._queue[: self.size], self._queue[self.size:]
        if len(set(out)) < len(out):
            # an epoch boundary repeated a video; top up with unused ones
            seen = list(dict.fromkeys(out))
            rest = [v for v in self.video_ids if v not in seen]
            out = seen + rest[: self.size - len(seen)]
        return out


def progress(step: int, total_steps: int) -> float:
    return step / max(total_steps - 1, 1)


def train(corpus: Corpus, cfg: ModelConfig, steps: int, seed: int = 0, lr: float = 1e-3,
          videos_per_batch: int = 4, shuffle: bool = True, model: MKTN | None = None,
          log_every: int = 0) -> TrainResult:
    """Optimise the total loss with RMSprop (no momentum).

    Each batch holds whole videos with all their queries, so a video is
    encoded once per step however many queries it has.
    """
    if model is None:
        model = build_model(cfg, seed)
    result = TrainResult(model)
    if steps <= 0:
        return result
    dtype = next(model.parameters()).dtype
    opt = torch.optim.RMSprop(model.parameters(), lr=lr, alpha=0.99, momentum=0.0)
    sampler = BatchSampler(list(corpus.manifest.videos), videos_per_batch, seed, shuffle)
    model.train()
    for step in range(steps):
        phi = threshold_schedule(progress(step, steps), cfg)
        batch = make_batch(corpus, sampler.next(), order="start_time", dtype=dtype)
        out = model(batch, phi)
        opt.zero_grad(set_to_none=True)
        out.total.backward()
        opt.step()
        row = {"step": step, "phi": phi, "total": float(out.total.detach())}
        row.update({k: float(v.detach()) for k, v in out.losses.items()})
        result.loss_curve.append(row)
        if log_every and step % log_every == 0:
            log.info("step %d phi=%.3f total=%.4f", step, phi, row["total"])
    model.eval()
    return result


def save_checkpoint(model: MKTN, path: str | Path, **meta) -> None:
    torch.save({"config": model.cfg.to_dict(), "state_dict": model.state_dict(), "meta": meta}, path)


def load_checkpoint(path: str | Path) -> MKTN:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cfg = ModelConfig.from_dict(blob["config"])
    model = MKTN(cfg)
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model

