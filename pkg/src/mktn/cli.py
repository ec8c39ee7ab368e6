"""Command line entry point: synth, train, eval, gradcheck, bench."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import torch

from .config import ModelConfig
from .feature_io import generate_synthetic_corpus, load_corpus, write_corpus
from .harness.bench import bench_vps
from .harness.evaluate import evaluate, predict_corpus, write_predictions
from .harness.gradcheck import gradcheck_model
from .harness.train import build_model, load_checkpoint, save_checkpoint, stream_seed, train

log = logging.getLogger("mktn")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _config(path: str | None) -> ModelConfig:
    return ModelConfig.load(path) if path else ModelConfig()


def _emit(report: dict, path: str | None) -> None:
    text = json.dumps(report, indent=2)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


def micro_config(base: ModelConfig | None = None) -> ModelConfig:
    """Smallest config that still exercises every module (used by gradcheck)."""
    from dataclasses import replace
    base = base or ModelConfig()
    return replace(base, d=4, C=2, N_a=2, N_p=2, attention_heads=2, max_frames=4, activity_queries=2)


def cmd_synth(args) -> int:
    cfg = _config(args.config)
    corpus = generate_synthetic_corpus(stream_seed(args.seed, "corpus"), args.videos,
                                       args.queries_per_video, cfg, num_frames=args.frames,
                                       num_words=args.words, signal=args.signal, noise=args.noise)
    path = write_corpus(corpus, args.out)
    _emit({"manifest": str(path), "videos": corpus.manifest.num_videos,
           "pairs": corpus.manifest.num_pairs}, None)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config)
    corpus = load_corpus(args.manifest)
    if corpus.manifest.d != cfg.d or corpus.manifest.C != cfg.C:
        raise SystemExit(f"config d={cfg.d}, C={cfg.C} does not match corpus "
                         f"d={corpus.manifest.d}, C={corpus.manifest.C}")
    t0 = time.perf_counter()
    result = train(corpus, cfg, args.steps, seed=args.seed, lr=args.lr,
                   videos_per_batch=args.videos_per_batch, log_every=args.log_every)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out, steps=args.steps, seed=args.seed)
    curve = out.with_suffix(".loss.json")
    curve.write_text(json.dumps(result.loss_curve))
    totals = result.totals
    _emit({"params": str(out), "loss_curve": str(curve), "steps": args.steps,
           "initial_loss": totals[0] if totals else None,
           "final_loss": totals[-1] if totals else None,
           "seconds": time.perf_counter() - t0}, None)
    return 0


def cmd_eval(args) -> int:
    corpus = load_corpus(args.manifest)
    model = load_checkpoint(args.params)
    topn = _ints(args.topn)
    preds = predict_corpus(model, corpus, max(topn), with_csm=model.cfg.ablations.csm)
    report = evaluate(model, corpus, topn=topn, ious=_floats(args.iou), predictions=preds)
    if args.predictions:
        write_predictions(preds, corpus, args.predictions)
    _emit(report.to_json(), args.report)
    return 0


def cmd_gradcheck(args) -> int:
    from .batch import make_batch
    cfg = micro_config(_config(args.config)) if args.micro else _config(args.config)
    corpus = generate_synthetic_corpus(stream_seed(args.seed, "corpus"), 2, 2, cfg,
                                       num_frames=4, num_words=3, min_len=0.5, max_len=0.75)
    qids = [r.query_id for r in corpus.manifest.entries][:3]
    batch = make_batch(corpus, list(corpus.manifest.videos), qids, dtype=torch.float64)
    model = build_model(cfg, args.seed, torch.float64)
    t0 = time.perf_counter()
    rep = gradcheck_model(model, batch, args.phi, eps=args.eps, tol=args.tol, raise_on_fail=False)
    _emit({"passed": rep.passed, "checked": rep.checked, "worst_path": rep.worst_path,
           "worst_error": rep.worst_error, "tol": rep.tol,
           "seconds": time.perf_counter() - t0}, args.report)
    return 0 if rep.passed else 1


def cmd_bench(args) -> int:
    corpus = load_corpus(args.manifest)
    model = load_checkpoint(args.params)
    modes = {"multi": "multi_pair", "single": "single_pair"}
    selected = list(modes) if args.mode == "both" else [args.mode]
    report = {modes[m]: bench_vps(model, corpus, modes[m], repeats=args.repeats, threads=args.threads)
              for m in selected}
    if len(selected) == 2:
        report["ratio"] = report["multi_pair"] / report["single_pair"]
    report["threads"] = torch.get_num_threads()
    _emit(report, args.report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mktn", description="Multi-pair temporal sentence grounding")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic planted-alignment corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--videos", type=int, default=20)
    s.add_argument("--queries-per-video", type=int, default=4)
    s.add_argument("--frames", type=int, default=32)
    s.add_argument("--words", type=int, default=8)
    s.add_argument("--signal", type=float, default=1.0)
    s.add_argument("--noise", type=float, default=0.5)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train on a corpus and write a checkpoint")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--videos-per-batch", type=int, default=4)
    t.add_argument("--log-every", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="R@n,IoU=m of a checkpoint")
    e.add_argument("--manifest", required=True)
    e.add_argument("--params", required=True)
    e.add_argument("--iou", default="0.3,0.5,0.7")
    e.add_argument("--topn", default="1,5")
    e.add_argument("--report")
    e.add_argument("--predictions", help="optional JSON lines output of the best span per query")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of the total loss")
    g.add_argument("--config")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--eps", type=float, default=1e-4)
    g.add_argument("--phi", type=float, default=0.9)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--micro", action=argparse.BooleanOptionalAction, default=True,
                   help="shrink the config to the micro size (default on)")
    g.add_argument("--report")
    g.set_defaults(func=cmd_gradcheck)

    b = sub.add_parser("bench", help="videos per second in multi- or single-pair mode")
    b.add_argument("--manifest", required=True)
    b.add_argument("--params", required=True)
    b.add_argument("--mode", choices=("multi", "single", "both"), default="both")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--report")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
