"""Command-line surface.

Subcommands: gen-corpus, train-detector, train, transfer, sweep, rateaudit,
eval, plus desk-run (the whole pipeline). Global flags --seed and --config;
artifacts land under --out-dir with a manifest recording config fingerprints.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import vocab as V
from .configio import Manifest, fingerprint, load_config
from .conditioning import SemanticEncoder, load_lm
from .corpus import CorpusConfig, generate_pairs, load_pairs, save_pairs, score_and_filter
from .detector import load_detector, save_detector, train_detector
from .embedding import TokenSequence
from .evalkit import (emit_report_csv, emit_sweep_csv, format_report_table, run_eval, run_sweep)
from .experiment import DeskConfig, TRAINING_DETECTOR, run_desk_experiment
from .model import StyleTransferModel
from .rateaudit import AuditPlan, run_audit
from .sampler import SamplerConfig, sdedit
from .trainflow import apply_ablation, load_model, pretrain_backbone, select_checkpoint, train


def _read_token_file(path: str) -> TokenSequence:
    text = Path(path).read_text()
    return TokenSequence(np.array([int(t) for t in text.split()], dtype=np.int64))


def _load_detectors(paths: list[str]) -> dict:
    dets = {}
    for i, p in enumerate(paths):
        det, meta = load_detector(p)
        dets[f"det{i}_{det.arch}" if i else TRAINING_DETECTOR] = det
    return dets


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_corpus(args) -> int:
    out = _out_dir(args)
    sizes = dict(zip(("alpha", "beta", "gamma"), (int(x) for x in args.sizes.split(","))))
    cfg = CorpusConfig(sizes=sizes, seed=args.seed)
    pairs = generate_pairs(cfg)
    path = out / "corpus.tsv"
    save_pairs(pairs, path)
    V.save_vocab(out / "vocab.txt")
    Manifest(out).record("corpus", path, "corpus", fingerprint(cfg), pairs=len(pairs))
    print(f"wrote {len(pairs)} pairs to {path}")
    return 0


def cmd_train_detector(args) -> int:
    pairs = load_pairs(args.corpus)
    det = train_detector(pairs, args.arch, args.seed)
    save_detector(args.out, det)
    print(f"detector ({args.arch}, seed {args.seed}) held-out accuracy "
          f"{det.holdout_accuracy:.3f} -> {args.out}")
    return 0


def cmd_train(args) -> int:
    desk = load_config(args.config)
    out = _out_dir(args)
    tcfg, split_layer, domain = apply_ablation(desk.train, desk.split_layer, args.ablation)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    pairs = load_pairs(args.corpus)
    if domain:
        pairs = [p for p in pairs if p.domain == domain]
    det, _ = load_detector(args.detector)
    encoder = None
    if tcfg.use_condition:
        lm, _ = load_lm(args.encoder)
        encoder = SemanticEncoder(lm, split_layer)
    if args.init:
        model, _ = load_model(args.init)
    else:
        model = StyleTransferModel(desk.model, seed=tcfg.seed)
        if not args.skip_pretrain:
            pretrain_backbone(desk.pretrain, pairs, model,
                              progress=lambda s, l: print(f"pretrain {s}: {l:.4f}"))
    fp = fingerprint(tcfg)
    result = train(tcfg, pairs, model, det, encoder, out, fingerprint=fp,
                   progress=lambda s, l: print(f"train {s}: {l:.4f}"))
    manifest = Manifest(out)
    manifest.record("model_final", result["final"], "model", fp,
                    checkpoints=[str(p) for p in result["checkpoints"]])
    print(f"final checkpoint: {result['final']}")
    if args.select and len(result["checkpoints"]) > 1:
        eval_pairs = load_pairs(args.select)
        best, rows = select_checkpoint(result["checkpoints"], eval_pairs, det, encoder,
                                       desk.select_gamma, desk.sampler_steps,
                                       use_condition=tcfg.use_condition)
        manifest.record("model_selected", best, "model", fp, selection=rows)
        print(f"selected checkpoint: {best}")
    return 0


def cmd_transfer(args) -> int:
    model, _ = load_model(args.model)
    encoder = None
    if args.encoder:
        lm, _ = load_lm(args.encoder)
        encoder = SemanticEncoder(lm, args.split_layer)
    src = _read_token_file(args.input)
    cfg = SamplerConfig(args.gamma, args.gamma_min, args.steps, seed=args.seed or 0)
    result = sdedit(model, src, cfg, encoder, use_condition=encoder is not None)
    line = " ".join(str(t) for t in result.output.tolist())
    if args.out:
        Path(args.out).write_text(line + "\n")
        print(f"wrote transfer to {args.out}")
    else:
        print(line)
    return 0


def cmd_sweep(args) -> int:
    desk = load_config(args.config)
    out = _out_dir(args)
    model, _ = load_model(args.model)
    dets = _load_detectors(args.detector)
    lm, _ = load_lm(args.encoder)
    encoder = SemanticEncoder(lm, desk.split_layer)
    neutral, _ = load_lm(args.lm)
    pairs = load_pairs(args.eval_corpus)
    gammas = [float(g) for g in args.gammas.split(",")] if args.gammas else list(desk.sweep_gammas)
    sweep = run_sweep(model, dets, encoder, neutral, pairs, gammas,
                      desk.sampler_steps, seed=args.seed or 0)
    path = out / "sweep.csv"
    emit_sweep_csv(sweep, path)
    Manifest(out).record("sweep", path, "sweep", fingerprint({"gammas": gammas}))
    rows = {f"gamma={g}": rep for g, rep in sweep.entries}
    print(format_report_table(rows, next(iter(dets))))
    print(f"wrote {path}")
    return 0


def cmd_eval(args) -> int:
    desk = load_config(args.config)
    out = _out_dir(args)
    model, _ = load_model(args.model)
    dets = _load_detectors(args.detector)
    lm, _ = load_lm(args.encoder)
    encoder = SemanticEncoder(lm, desk.split_layer)
    neutral, _ = load_lm(args.lm)
    pairs = load_pairs(args.eval_corpus)
    report = run_eval(model, dets, encoder, neutral, pairs, args.gamma,
                      desk.sampler_steps, seed=args.seed or 0)
    path = out / "eval.csv"
    emit_report_csv({f"gamma={args.gamma}": report}, path)
    print(format_report_table({f"gamma={args.gamma}": report}, next(iter(dets))))
    print(f"wrote {path}")
    return 0


def cmd_rateaudit(args) -> int:
    model, _ = load_model(args.model)
    det, _ = load_detector(args.detector)
    lm, _ = load_lm(args.encoder)
    encoder = SemanticEncoder(lm, args.split_layer)
    doc = _read_token_file(args.doc)
    ladder = tuple(float(g) for g in args.ladder.split(","))
    plan = AuditPlan(args.target, args.epsilon, ladder, model.cfg.s_max)
    rewritten, report = run_audit(doc, plan, model, det, encoder, seed=args.seed or 0)
    print(f"achieved {report.achieved:.4f} (target {args.target}) in {report.iterations} iterations; "
          f"{report.chunks_rewritten}/{len(report.weights)} chunks rewritten "
          f"(ratio {report.rewrite_ratio:.2f}); status {report.status}")
    if args.report_out:
        with open(args.report_out, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["chunk", "weight", "before", "after"])
            for i, (wt, b, a) in enumerate(zip(report.weights, report.before_scores,
                                               report.after_scores)):
                w.writerow([i, f"{wt:.6f}", f"{b:.6f}", f"{a:.6f}"])
        print(f"wrote per-chunk report to {args.report_out}")
    if args.out:
        Path(args.out).write_text(" ".join(str(t) for t in rewritten.tolist()) + "\n")
    return 0


def cmd_desk_run(args) -> int:
    desk = load_config(args.config)
    if args.seed is not None:
        desk.seed = args.seed
    artifacts = run_desk_experiment(desk, root=args.out_dir or None)
    print(f"desk experiment complete under {artifacts.root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowstyle",
                                     description="flow-matching style transfer testbed")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="root random seed")
    common.add_argument("--config", default=None, help="INI config file")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="generate a two-style corpus")
    p.add_argument("--sizes", default="8000,1600,500", help="pairs per domain: alpha,beta,gamma")
    p.add_argument("--out", dest="out_dir", required=True)
    p.set_defaults(fn=cmd_gen_corpus, seed=0)

    p = sub.add_parser("train-detector", parents=[common], help="fit and freeze a toy detector")
    p.add_argument("--arch", required=True, choices=("meanpool_mlp", "attention", "bigram_logistic"))
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_detector, seed=0)

    p = sub.add_parser("train", parents=[common], help="run conditional training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--detector", required=True)
    p.add_argument("--encoder", help="frozen encoder LM checkpoint")
    p.add_argument("--init", help="start from this model checkpoint (skips pretraining)")
    p.add_argument("--skip-pretrain", action="store_true")
    p.add_argument("--select", help="eval corpus for checkpoint selection")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--ablation", default="none", choices=("none", "a1", "a2", "a3", "a4", "a5"))
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("transfer", parents=[common], help="restyle one token sequence")
    p.add_argument("--model", required=True)
    p.add_argument("--encoder")
    p.add_argument("--split-layer", type=int, default=2)
    p.add_argument("--input", required=True, help="file of space-separated token ids")
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--gamma-min", type=float, default=-4.0)
    p.add_argument("--steps", type=int, default=16)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("sweep", parents=[common], help="evaluate across a gamma grid")
    p.add_argument("--model", required=True)
    p.add_argument("--detector", action="append", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--lm", required=True, help="neutral LM checkpoint for perplexity")
    p.add_argument("--eval-corpus", required=True)
    p.add_argument("--gammas", help="comma-separated gamma grid")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("eval", parents=[common], help="evaluate at a single gamma")
    p.add_argument("--model", required=True)
    p.add_argument("--detector", action="append", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--lm", required=True)
    p.add_argument("--eval-corpus", required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("rateaudit", parents=[common], help="drive a document to a target rate")
    p.add_argument("--model", required=True)
    p.add_argument("--detector", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--split-layer", type=int, default=2)
    p.add_argument("--doc", required=True, help="file of space-separated token ids")
    p.add_argument("--target", type=float, required=True)
    p.add_argument("--epsilon", type=float, default=0.02)
    p.add_argument("--ladder", default="3.0,4.0,5.0,6.0")
    p.add_argument("--report-out")
    p.add_argument("--out", help="write the rewritten document here")
    p.set_defaults(fn=cmd_rateaudit)

    p = sub.add_parser("desk-run", parents=[common], help="run the full desk experiment")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(fn=cmd_desk_run)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
