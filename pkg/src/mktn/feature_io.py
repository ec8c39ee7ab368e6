"""On-disk corpus format, feature loading, and synthetic corpus generation.

A corpus is a ``manifest.json`` plus one little-endian float32 blob per
video (``[N_v, C+1, d]``, slot 0 is the global frame feature) and per query
(``[N_q, d]`` word features).  Timestamps in the manifest are seconds; the
model works in frame units obtained through ``frames_per_second``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .config import ModelConfig
from .errors import BadTimestamps, InvalidConfig, MissingFile, ShapeMismatch

DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class Segment:
    start: float
    end: float


def compute_iou(a: Segment, b: Segment) -> float:
    """Temporal IoU.  Zero-length segments score 1 only against the same point."""
    len_a = a.end - a.start
    len_b = b.end - b.start
    if len_a <= 0 or len_b <= 0:
        if len_a == 0 and len_b == 0 and a.start == b.start:
            return 1.0
        return 0.0
    inter = min(a.end, b.end) - max(a.start, b.start)
    if inter <= 0:
        return 0.0
    union = len_a + len_b - inter
    return inter / union


def iou_matrix(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Vectorised IoU of ``pred[..., 2]`` against ``gt[..., 2]`` (broadcast)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    inter = np.minimum(pred[..., 1], gt[..., 1]) - np.maximum(pred[..., 0], gt[..., 0])
    inter = np.clip(inter, 0.0, None)
    union = (pred[..., 1] - pred[..., 0]) + (gt[..., 1] - gt[..., 0]) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    same_point = (pred[..., 0] == pred[..., 1]) & (gt[..., 0] == gt[..., 1]) & (pred[..., 0] == gt[..., 0])
    return np.where(same_point, 1.0, out)


@dataclass(frozen=True)
class VideoEntry:
    id: str
    num_frames: int
    blob: str


@dataclass(frozen=True)
class PairRecord:
    video_id: str
    query_id: str
    t_s: float
    t_e: float
    num_frames: int
    num_words: int
    blob: str


@dataclass
class CorpusManifest:
    d: int
    C: int
    videos: dict[str, VideoEntry]
    entries: list[PairRecord]
    frames_per_second: float = 1.0
    root: Path = field(default_factory=Path)

    @property
    def num_pairs(self) -> int:
        return len(self.entries)

    @property
    def num_videos(self) -> int:
        return len(self.videos)

    def video_path(self, video_id: str) -> Path:
        return self.root / self.videos[video_id].blob

    def query_path(self, rec: PairRecord) -> Path:
        return self.root / rec.blob

    def to_frames(self, seconds: float, num_frames: int) -> float:
        """Seconds to frame units, clamped to the frame axis ``[0, N_v-1]``."""
        return float(min(max(seconds * self.frames_per_second, 0.0), num_frames - 1))

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "C": self.C,
            "frames_per_second": self.frames_per_second,
            "videos": [
                {"id": v.id, "num_frames": v.num_frames, "blob": v.blob}
                for v in self.videos.values()
            ],
            "queries": [
                {"id": r.query_id, "video_id": r.video_id, "num_words": r.num_words,
                 "blob": r.blob, "t_s": r.t_s, "t_e": r.t_e}
                for r in self.entries
            ],
        }


@dataclass
class Corpus:
    """A manifest with its feature arrays resident in memory."""

    manifest: CorpusManifest
    videos: dict[str, np.ndarray]
    queries: dict[str, np.ndarray]

    def gt_frames(self, rec: PairRecord) -> tuple[float, float]:
        m = self.manifest
        return m.to_frames(rec.t_s, rec.num_frames), m.to_frames(rec.t_e, rec.num_frames)

    def queries_by_video(self) -> dict[str, list[PairRecord]]:
        groups: dict[str, list[PairRecord]] = {vid: [] for vid in self.manifest.videos}
        for rec in self.manifest.entries:
            groups[rec.video_id].append(rec)
        return groups


def load_manifest(path: str | Path) -> CorpusManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    with open(path) as fh:
        raw = json.load(fh)
    try:
        d = int(raw["d"])
        C = int(raw["C"])
        fps = float(raw.get("frames_per_second", 1.0))
        video_items = raw["videos"]
        query_items = raw["queries"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ShapeMismatch(f"malformed manifest: {exc}") from exc
    if d < 1 or C < 1 or fps <= 0:
        raise ShapeMismatch("d, C and frames_per_second must be positive")
    root = path.parent

    videos: dict[str, VideoEntry] = {}
    for item in video_items:
        v = VideoEntry(str(item["id"]), int(item["num_frames"]), str(item["blob"]))
        if v.id in videos:
            raise ShapeMismatch(f"duplicate video id {v.id!r}")
        if v.num_frames < 1:
            raise ShapeMismatch(f"video {v.id!r} has no frames")
        _check_blob(root / v.blob, v.num_frames * (C + 1) * d)
        videos[v.id] = v

    entries: list[PairRecord] = []
    seen: set[str] = set()
    for item in query_items:
        vid = str(item["video_id"])
        if vid not in videos:
            raise MissingFile(f"query {item['id']!r} references unknown video {vid!r}")
        rec = PairRecord(
            video_id=vid,
            query_id=str(item["id"]),
            t_s=float(item["t_s"]),
            t_e=float(item["t_e"]),
            num_frames=videos[vid].num_frames,
            num_words=int(item["num_words"]),
            blob=str(item["blob"]),
        )
        if rec.query_id in seen:
            raise ShapeMismatch(f"duplicate query id {rec.query_id!r}")
        seen.add(rec.query_id)
        if rec.num_words < 1:
            raise ShapeMismatch(f"query {rec.query_id!r} has no words")
        duration = rec.num_frames / fps
        if not (0.0 <= rec.t_s < rec.t_e <= duration + 1e-9):
            raise BadTimestamps(
                f"query {rec.query_id!r}: need 0 <= t_s < t_e <= {duration}, "
                f"got ({rec.t_s}, {rec.t_e})"
            )
        _check_blob(root / rec.blob, rec.num_words * d)
        entries.append(rec)

    return CorpusManifest(d=d, C=C, videos=videos, entries=entries,
                          frames_per_second=fps, root=root)


def _check_blob(path: Path, n_floats: int) -> None:
    if not path.is_file():
        raise MissingFile(str(path))
    size = path.stat().st_size
    if size != n_floats * DTYPE.itemsize:
        raise ShapeMismatch(f"{path}: expected {n_floats * DTYPE.itemsize} bytes, found {size}")


def load_video(manifest: CorpusManifest, video_id: str, mmap: bool = False) -> np.ndarray:
    v = manifest.videos[video_id]
    shape = (v.num_frames, manifest.C + 1, manifest.d)
    path = manifest.video_path(video_id)
    if mmap:
        return np.memmap(path, dtype=DTYPE, mode="r", shape=shape)
    return np.fromfile(path, dtype=DTYPE).reshape(shape)


def load_query(manifest: CorpusManifest, rec: PairRecord) -> np.ndarray:
    return np.fromfile(manifest.query_path(rec), dtype=DTYPE).reshape(rec.num_words, manifest.d)


def load_corpus(path: str | Path) -> Corpus:
    manifest = load_manifest(path)
    videos = {vid: load_video(manifest, vid) for vid in manifest.videos}
    queries = {rec.query_id: load_query(manifest, rec) for rec in manifest.entries}
    for arr in list(videos.values()) + list(queries.values()):
        if not np.all(np.isfinite(arr)):
            raise ShapeMismatch("feature blobs must be finite")
    return Corpus(manifest, videos, queries)


def write_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    """Write blobs and ``manifest.json`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    (out / "queries").mkdir(parents=True, exist_ok=True)
    m = corpus.manifest
    for vid, entry in m.videos.items():
        np.ascontiguousarray(corpus.videos[vid], dtype=DTYPE).tofile(out / entry.blob)
    for rec in m.entries:
        np.ascontiguousarray(corpus.queries[rec.query_id], dtype=DTYPE).tofile(out / rec.blob)
    path = out / "manifest.json"
    with open(path, "w") as fh:
        json.dump(m.to_json(), fh, indent=1)
    m.root = out
    return path


def generate_synthetic_corpus(
    seed: int,
    n_videos: int,
    queries_per_video: int,
    cfg: ModelConfig,
    num_frames: int = 32,
    num_words: int = 8,
    signal: float = 1.0,
    noise: float = 0.5,
    min_len: float = 0.15,
    max_len: float = 0.45,
    planted_patches: Optional[int] = None,
) -> Corpus:
    """Planted-alignment corpus.

    Every query draws a latent direction from a unit-variance spherical
    Gaussian.  Its words carry ``signal * z`` and so do the global slots (and
    the first ``planted_patches`` patch slots) of the frames inside its target
    segment; everything else is i.i.d. Gaussian noise of scale ``noise``.
    Segment lengths are uniform in ``[min_len, max_len]`` as a fraction of the
    video, with fractional boundary jitter.  ``frames_per_second`` is 1, so
    manifest seconds equal frame units.
    """
    if n_videos < 2:
        raise InvalidConfig("n_videos must be >= 2")
    if queries_per_video < 1:
        raise InvalidConfig("queries_per_video must be >= 1")
    if not 0 < min_len <= max_len:
        raise InvalidConfig("need 0 < min_len <= max_len")
    if max_len > 1.0 or max(2, math.ceil(min_len * num_frames)) > num_frames:
        raise InvalidConfig("segment longer than video")
    if num_frames < 2 or num_words < 1:
        raise InvalidConfig("num_frames must be >= 2 and num_words >= 1")
    d, C = cfg.d, cfg.C
    if planted_patches is None:
        planted_patches = (C + 1) // 2
    rng = np.random.default_rng(np.random.SeedSequence(seed))

    videos: dict[str, VideoEntry] = {}
    video_arrays: dict[str, np.ndarray] = {}
    entries: list[PairRecord] = []
    query_arrays: dict[str, np.ndarray] = {}
    width = len(str(n_videos - 1))
    for v in range(n_videos):
        vid = f"v{v:0{width}d}"
        grid = noise * rng.standard_normal((num_frames, C + 1, d))
        for k in range(queries_per_video):
            z = rng.standard_normal(d)
            lo = max(2, int(round(min_len * num_frames)))
            hi = max(lo, int(round(max_len * num_frames)))
            length = int(rng.integers(lo, hi + 1))
            s_int = int(rng.integers(0, num_frames - length + 1))
            e_int = s_int + length - 1
            grid[s_int:e_int + 1, 0, :] += signal * z
            if planted_patches:
                grid[s_int:e_int + 1, 1:1 + planted_patches, :] += signal * z
            jitter = rng.uniform(0.0, 0.5, size=2)
            t_s = max(0.0, s_int - jitter[0])
            t_e = min(float(num_frames - 1), e_int + jitter[1])
            words = signal * z + noise * rng.standard_normal((num_words, d))
            qid = f"{vid}_q{k}"
            query_arrays[qid] = words.astype(DTYPE)
            entries.append(PairRecord(vid, qid, float(t_s), float(t_e), num_frames,
                                      num_words, f"queries/{qid}.f32"))
        video_arrays[vid] = grid.astype(DTYPE)
        videos[vid] = VideoEntry(vid, num_frames, f"videos/{vid}.f32")

    manifest = CorpusManifest(d=d, C=C, videos=videos, entries=entries, frames_per_second=1.0)
    return Corpus(manifest, video_arrays, query_arrays)


def subset(corpus: Corpus, video_ids: Iterable[str]) -> Corpus:
    keep = list(video_ids)
    m = corpus.manifest
    manifest = CorpusManifest(
        d=m.d, C=m.C,
        videos={vid: m.videos[vid] for vid in keep},
        entries=[r for r in m.entries if r.video_id in set(keep)],
        frames_per_second=m.frames_per_second,
        root=m.root,
    )
    return Corpus(manifest, {vid: corpus.videos[vid] for vid in keep},
                  {r.query_id: corpus.queries[r.query_id] for r in manifest.entries})
