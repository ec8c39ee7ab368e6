import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mktn import ModelConfig
from mktn.errors import BadTimestamps, InvalidConfig, MissingFile, ShapeMismatch
from mktn.feature_io import (Segment, compute_iou, generate_synthetic_corpus, iou_matrix,
                             load_corpus, load_manifest, load_video, write_corpus)


def _write_manifest(tmp_path, video_bytes=384, t_s=1.0, t_e=3.0, n_words=2):
    (tmp_path / "v.f32").write_bytes(b"\0" * video_bytes)
    (tmp_path / "q.f32").write_bytes(b"\0" * (n_words * 8 * 4))
    manifest = {
        "d": 8, "C": 2,
        "videos": [{"id": "v", "num_frames": 4, "blob": "v.f32"}],
        "queries": [{"id": "q", "video_id": "v", "num_words": n_words, "blob": "q.f32",
                     "t_s": t_s, "t_e": t_e}],
    }
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path


def test_manifest_valid(tmp_path):
    m = load_manifest(_write_manifest(tmp_path))
    assert m.num_pairs == 1 and m.num_videos == 1
    assert m.entries[0].num_frames == 4 and m.d == 8 and m.C == 2


def test_manifest_short_blob(tmp_path):
    with pytest.raises(ShapeMismatch):
        load_manifest(_write_manifest(tmp_path, video_bytes=380))


def test_manifest_reversed_timestamps(tmp_path):
    with pytest.raises(BadTimestamps):
        load_manifest(_write_manifest(tmp_path, t_s=5.0, t_e=3.0))


def test_manifest_timestamp_past_duration(tmp_path):
    with pytest.raises(BadTimestamps):
        load_manifest(_write_manifest(tmp_path, t_s=1.0, t_e=4.5))


def test_manifest_missing(tmp_path):
    with pytest.raises(MissingFile):
        load_manifest(tmp_path / "nope.json")
    path = _write_manifest(tmp_path)
    (tmp_path / "q.f32").unlink()
    with pytest.raises(MissingFile):
        load_manifest(path)


def test_iou_examples():
    assert compute_iou(Segment(2, 5), Segment(2, 5)) == 1.0
    assert compute_iou(Segment(0, 2), Segment(3, 5)) == 0.0
    # intersection [2,4] = 2, union [1,6] = 5
    assert compute_iou(Segment(1, 4), Segment(2, 6)) == pytest.approx(0.4, abs=1e-12)


def test_iou_zero_length():
    assert compute_iou(Segment(3, 3), Segment(3, 3)) == 1.0
    assert compute_iou(Segment(3, 3), Segment(2, 5)) == 0.0
    assert compute_iou(Segment(3, 3), Segment(4, 4)) == 0.0


seg = st.tuples(st.floats(0, 50, allow_nan=False), st.floats(0, 50, allow_nan=False)).map(
    lambda t: Segment(min(t), max(t)))


@given(seg, seg)
@settings(max_examples=200, deadline=None)
def test_iou_symmetric_and_bounded(a, b):
    v = compute_iou(a, b)
    assert v == compute_iou(b, a)
    assert 0.0 <= v <= 1.0
    vec = iou_matrix(np.array([a.start, a.end]), np.array([b.start, b.end]))
    assert float(vec) == pytest.approx(v, abs=1e-12)


@given(seg)
def test_iou_self(a):
    if a.end > a.start:
        assert compute_iou(a, a) == 1.0


CFG = ModelConfig(d=8, C=2, attention_heads=2)


def test_synthetic_deterministic(tmp_path):
    a = generate_synthetic_corpus(7, 3, 2, CFG)
    b = generate_synthetic_corpus(7, 3, 2, CFG)
    pa = write_corpus(a, tmp_path / "a")
    pb = write_corpus(b, tmp_path / "b")
    for vid in a.manifest.videos:
        assert (tmp_path / "a" / "videos" / f"{vid}.f32").read_bytes() == \
            (tmp_path / "b" / "videos" / f"{vid}.f32").read_bytes()
    for rec in a.manifest.entries:
        assert (pa.parent / rec.blob).read_bytes() == (pb.parent / rec.blob).read_bytes()
    c = generate_synthetic_corpus(8, 3, 2, CFG)
    assert not np.array_equal(a.videos["v0"], c.videos["v0"])


def test_round_trip(tmp_path):
    corpus = generate_synthetic_corpus(3, 4, 3, CFG)
    path = write_corpus(corpus, tmp_path)
    back = load_corpus(path)
    assert back.manifest.to_json() == corpus.manifest.to_json()
    for vid, arr in corpus.videos.items():
        assert back.videos[vid].tobytes() == arr.tobytes()
        assert np.array_equal(load_video(back.manifest, vid, mmap=True), arr)
    for qid, arr in corpus.queries.items():
        assert back.queries[qid].tobytes() == arr.tobytes()


def _cos(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_noise_free_alignment():
    corpus = generate_synthetic_corpus(5, 4, 1, CFG, signal=1.0, noise=0.0)
    for rec in corpus.manifest.entries:
        words = corpus.queries[rec.query_id].astype(np.float64)
        grid = corpus.videos[rec.video_id].astype(np.float64)
        s, e = math.ceil(rec.t_s), math.floor(rec.t_e)
        seg_mean = grid[s:e + 1, 0, :].mean(axis=0)
        assert _cos(words.mean(axis=0), seg_mean) == pytest.approx(1.0, abs=1e-6)


def test_zero_signal_uncorrelated():
    corpus = generate_synthetic_corpus(11, 30, 1, ModelConfig(d=32, C=2), signal=0.0, noise=1.0)
    cos = []
    for rec in corpus.manifest.entries:
        words = corpus.queries[rec.query_id].mean(axis=0)
        grid = corpus.videos[rec.video_id]
        s, e = math.ceil(rec.t_s), math.floor(rec.t_e)
        cos.append(_cos(words, grid[s:e + 1, 0, :].mean(axis=0)))
    # cosine of independent 32-d Gaussians has sd 1/sqrt(32); the mean of 30 is ~0.03 sd
    assert abs(np.mean(cos)) < 4 / math.sqrt(32 * 30)


def test_distinct_latents_per_segment():
    corpus = generate_synthetic_corpus(2, 2, 3, CFG, noise=0.0)
    recs = corpus.queries_by_video()["v0"]
    a, b = (corpus.queries[r.query_id][0] for r in recs[:2])
    assert abs(_cos(a, b)) < 0.999


def test_timestamps_valid():
    corpus = generate_synthetic_corpus(9, 10, 4, CFG)
    for rec in corpus.manifest.entries:
        assert 0 <= rec.t_s < rec.t_e <= rec.num_frames


@pytest.mark.parametrize("kwargs", [dict(n_videos=1), dict(queries_per_video=0),
                                    dict(max_len=1.5), dict(num_frames=1), dict(min_len=0.5, max_len=0.2)])
def test_synthetic_invalid(kwargs):
    args = dict(seed=0, n_videos=2, queries_per_video=1, cfg=CFG)
    args.update(kwargs)
    with pytest.raises(InvalidConfig):
        generate_synthetic_corpus(**args)
