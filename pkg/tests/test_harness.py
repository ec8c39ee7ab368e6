import json
from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mktn import ModelConfig
from mktn.batch import make_batch
from mktn.cli import main, micro_config
from mktn.errors import GradMismatch
from mktn.feature_io import generate_synthetic_corpus, iou_matrix
from mktn.harness.bench import bench_vps
from mktn.harness.evaluate import evaluate, random_span_baseline, recall_at, write_predictions
from mktn.harness.gradcheck import gradcheck, gradcheck_model
from mktn.harness.train import (BatchSampler, build_model, load_checkpoint, progress,
                                save_checkpoint, stream_seed, train)
from mktn.model import Prediction

CFG = ModelConfig(d=8, C=2, N_a=2, N_p=2, attention_heads=2, max_frames=16, activity_queries=2)


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_corpus(0, 4, 2, CFG, num_frames=10, num_words=4)


def test_stream_seeds_distinct():
    seeds = {stream_seed(3, name) for name in ("corpus", "init", "shuffle")}
    assert len(seeds) == 3
    assert stream_seed(3, "init") == stream_seed(3, "init")


def test_progress_range():
    assert progress(0, 10) == 0.0 and progress(9, 10) == 1.0
    assert progress(0, 1) == 0.0


def test_sampler_groups_distinct_videos():
    s = BatchSampler(["a", "b", "c"], 2, seed=0)
    for _ in range(10):
        batch = s.next()
        assert len(batch) == 2 and len(set(batch)) == 2


def test_train_zero_steps(corpus):
    model = build_model(CFG, 1)
    before = {n: p.clone() for n, p in model.state_dict().items()}
    result = train(corpus, CFG, 0, model=model)
    assert result.loss_curve == []
    for n, p in result.model.state_dict().items():
        assert torch.equal(p, before[n])


def test_train_zero_lr_constant(corpus):
    cfg = CFG.with_ablation(avm=False)
    result = train(corpus, cfg, 5, seed=2, lr=0.0, videos_per_batch=4, shuffle=False)
    assert len(set(result.totals)) == 1


def test_train_deterministic(corpus):
    a = train(corpus, CFG, 5, seed=3)
    b = train(corpus, CFG, 5, seed=3)
    assert a.totals == b.totals
    for (n, p), (_, q) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(p, q), n


def test_threshold_nondecreasing_during_training(corpus):
    phis = [row["phi"] for row in train(corpus, CFG, 12, seed=0).loss_curve]
    assert phis[0] == CFG.phi_initial and phis[-1] == CFG.phi_final
    assert all(b >= a for a, b in zip(phis, phis[1:]))


def test_train_decreases_loss():
    cfg = ModelConfig(d=16, C=2, N_a=2, N_p=2, attention_heads=2, max_frames=16)
    corpus = generate_synthetic_corpus(1, 6, 2, cfg, num_frames=12, num_words=4, noise=0.3)
    totals = train(corpus, cfg, 500, seed=0).totals
    assert np.mean(totals[-20:]) < np.mean(totals[:20])
    assert totals[-1] < totals[0]


def test_checkpoint_round_trip(tmp_path, corpus):
    model = build_model(CFG, 4)
    save_checkpoint(model, tmp_path / "m.pt", steps=0)
    back = load_checkpoint(tmp_path / "m.pt")
    assert back.cfg == CFG
    batch = make_batch(corpus, list(corpus.manifest.videos))
    assert torch.equal(back(batch, 0.3).total, model(batch, 0.3).total)


def _pred(qid, *spans):
    return Prediction(qid, [(s, e, 1.0) for s, e in spans])


def test_recall_identity_and_disjoint():
    gt = [(1.0, 4.0), (0.0, 2.5)]
    assert recall_at([[(1.0, 4.0)], [(0.0, 2.5)]], gt, 1, 0.7) == 1.0
    far = [[(6.0, 8.0)], [(5.0, 9.0)]]
    assert all(recall_at(far, gt, n, m) == 0.0 for n in (1, 5) for m in (0.3, 0.5, 0.7))


def test_recall_three_queries():
    gt = [(0.0, 10.0)] * 3
    # IoUs 0.8, 0.4, 0.6 against [0, 10]
    cands = [[(0.0, 8.0)], [(0.0, 4.0)], [(0.0, 6.0)]]
    assert recall_at(cands, gt, 1, 0.5) == pytest.approx(float(Fraction(2, 3)))


def test_evaluate_report(corpus):
    model = build_model(CFG, 0)
    preds = [_pred(r.query_id, corpus.gt_frames(r), (0.0, 0.5)) for r in corpus.manifest.entries]
    report = evaluate(model, corpus, predictions=preds)
    assert report.recall[(1, 0.7)] == 1.0 and report.recall[(5, 0.3)] == 1.0
    js = report.to_json()
    assert js["recall"]["R@1,IoU=0.5"] == 1.0 and js["num_queries"] == corpus.manifest.num_pairs


def test_evaluate_model_monotone(corpus):
    model = build_model(CFG, 0)
    report = evaluate(model, corpus, topn=(1, 5), ious=(0.1, 0.3, 0.5, 0.7, 0.9))
    for n in (1, 5):
        vals = [report.recall[(n, m)] for m in (0.1, 0.3, 0.5, 0.7, 0.9)]
        assert vals == sorted(vals, reverse=True)
    for m in (0.1, 0.3, 0.5, 0.7, 0.9):
        assert report.recall[(5, m)] >= report.recall[(1, m)]
    assert 0.0 <= min(report.recall.values()) and max(report.recall.values()) <= 1.0
    assert set(report.csm_recall) == {0.1, 0.3, 0.5, 0.7, 0.9}


@given(st.lists(st.tuples(st.floats(0, 20), st.floats(0, 20)), min_size=5, max_size=5),
       st.tuples(st.floats(0, 20), st.floats(0.5, 20)))
@settings(max_examples=100, deadline=None)
def test_recall_monotone_property(spans, g):
    cands = [[tuple(sorted(s)) for s in spans]]
    gt = [(g[0], g[0] + g[1])]
    for n in (1, 3, 5):
        vals = [recall_at(cands, gt, n, m) for m in (0.1, 0.3, 0.5, 0.7)]
        assert vals == sorted(vals, reverse=True)
    assert recall_at(cands, gt, 5, 0.5) >= recall_at(cands, gt, 1, 0.5)


def test_random_baseline_oracle(corpus):
    # independent analytic check on one segment: exact probability by a fine grid over endpoints
    rec = corpus.manifest.entries[0]
    single = type(corpus)(type(corpus.manifest)(corpus.manifest.d, corpus.manifest.C,
                                                {rec.video_id: corpus.manifest.videos[rec.video_id]},
                                                [rec]), corpus.videos, corpus.queries)
    mc = random_span_baseline(single, 0.5, samples=200_000, seed=1)
    grid = np.linspace(0, rec.num_frames - 1, 801)
    a, b = np.meshgrid(grid, grid)
    pts = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=-1)
    exact = float((iou_matrix(pts, np.asarray(corpus.gt_frames(rec))) >= 0.5).mean())
    assert mc == pytest.approx(exact, abs=0.01)


def test_write_predictions(tmp_path, corpus):
    preds = [_pred(r.query_id, (1.0, 3.0)) for r in corpus.manifest.entries]
    write_predictions(preds, corpus, tmp_path / "p.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "p.jsonl").read_text().splitlines()]
    assert len(rows) == corpus.manifest.num_pairs
    assert rows[0]["t_s"] == 1.0 and rows[0]["t_e_seconds"] == 3.0


def test_bench_positive(corpus):
    model = build_model(CFG, 0)
    for mode in ("multi_pair", "single_pair"):
        assert bench_vps(model, corpus, mode, repeats=1) > 0
    with pytest.raises(ValueError):
        bench_vps(model, corpus, "sideways")


def test_bench_one_query_per_video_parity():
    corpus = generate_synthetic_corpus(0, 8, 1, CFG, num_frames=16)
    model = build_model(CFG, 0)
    # timing noise on a shared machine: accept the first of a few attempts
    for _ in range(3):
        multi = bench_vps(model, corpus, "multi_pair", repeats=7)
        single = bench_vps(model, corpus, "single_pair", repeats=7)
        if abs(multi - single) / max(multi, single) < 0.10:
            break
    assert abs(multi - single) / max(multi, single) < 0.10


def test_gradcheck_linear_exact():
    torch.manual_seed(0)
    W = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    x = torch.randn(4, dtype=torch.float64)
    c = torch.randn(3, dtype=torch.float64)
    rep = gradcheck(lambda: c @ (W @ x), {"W": W}, eps=1e-3, tol=1e-10)
    assert rep.passed and rep.checked == 12 and rep.worst_error < 1e-10


def test_gradcheck_fault_injection():
    W = torch.randn(2, 2, dtype=torch.float64, requires_grad=True)
    bad = {"W": torch.zeros(2, 2, dtype=torch.float64)}
    with pytest.raises(GradMismatch) as info:
        gradcheck(lambda: (W ** 2).sum() + W.sum(), {"W": W}, analytic=bad)
    assert info.value.path.startswith("W[")


def test_gradcheck_model_two_pairs():
    cfg = micro_config()
    corpus = generate_synthetic_corpus(0, 2, 1, cfg, num_frames=4, num_words=3, min_len=0.5, max_len=0.75)
    batch = make_batch(corpus, list(corpus.manifest.videos), dtype=torch.float64)
    model = build_model(cfg, 0, torch.float64)
    names = [n for n, _ in model.named_parameters() if n.startswith(("coattention.out", "W_S", "csm.regressor"))]
    rep = gradcheck_model(model, batch, 0.9, eps=1e-4, tol=1e-3, names=names)
    assert rep.passed and rep.checked == sum(p.numel() for n, p in model.named_parameters() if n in names)


def test_cli_end_to_end(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    CFG.save(cfg_path)
    data = tmp_path / "data"
    assert main(["synth", "--seed", "1", "--videos", "3", "--queries-per-video", "2",
                 "--frames", "8", "--config", str(cfg_path), "--out", str(data)]) == 0
    manifest = data / "manifest.json"
    assert manifest.is_file()
    ckpt = tmp_path / "model.pt"
    assert main(["train", "--manifest", str(manifest), "--config", str(cfg_path),
                 "--steps", "3", "--seed", "0", "--out", str(ckpt)]) == 0
    assert ckpt.is_file()
    report = tmp_path / "eval.json"
    assert main(["eval", "--manifest", str(manifest), "--params", str(ckpt), "--iou", "0.3,0.5",
                 "--topn", "1,5", "--report", str(report), "--predictions", str(tmp_path / "p.jsonl")]) == 0
    js = json.loads(report.read_text())
    assert set(js["recall"]) == {"R@1,IoU=0.3", "R@1,IoU=0.5", "R@5,IoU=0.3", "R@5,IoU=0.5"}
    bench = tmp_path / "bench.json"
    assert main(["bench", "--manifest", str(manifest), "--params", str(ckpt), "--mode", "both",
                 "--repeats", "1", "--report", str(bench)]) == 0
    bj = json.loads(bench.read_text())
    assert bj["multi_pair"] > 0 and bj["single_pair"] > 0 and "ratio" in bj
    capsys.readouterr()


def test_cli_train_config_mismatch(tmp_path):
    data = tmp_path / "data"
    main(["synth", "--videos", "2", "--queries-per-video", "1", "--frames", "6", "--out", str(data)])
    cfg_path = tmp_path / "cfg.json"
    CFG.save(cfg_path)
    with pytest.raises(SystemExit):
        main(["train", "--manifest", str(data / "manifest.json"), "--config", str(cfg_path),
              "--steps", "1", "--out", str(tmp_path / "m.pt")])
