"""The full desk experiment: corpus -> detectors -> frozen LMs -> backbone
pretraining -> conditional training (full + no-condition ablation) ->
checkpoint selection -> gamma sweep -> document-audit runs.

Every stage is cached on disk keyed by a fingerprint of everything upstream
of it, so re-runs only redo stages whose configuration changed. The cache
directory defaults to .flowstyle_cache (override with $FLOWSTYLE_CACHE).
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .backbone import DiTConfig
from .conditioning import SemanticEncoder, TinyLM, TinyLMConfig, load_lm, save_lm, train_lm
from .configio import Manifest, fingerprint
from .corpus import CorpusConfig, StylePair, generate_pairs, load_pairs, save_pairs, score_and_filter
from .detector import ToyDetector, load_detector, save_detector, train_detector
from .embedding import TokenSequence
from .evalkit import (EvalReport, SweepResult, emit_pareto_csv, emit_report_csv, emit_sweep_csv,
                      format_report_table, reference_rows, run_sweep)
from .model import StyleTransferModel
from .rateaudit import AuditPlan, run_audit
from .trainflow import (PretrainConfig, TrainConfig, apply_ablation, load_model,
                        pretrain_backbone, save_train_checkpoint, select_checkpoint, train)
from .vocab import save_vocab

# instance 0 trains the reward and filters the corpus; the rest stay held out.
# The in-the-loop instance is the count-feature one: it reads template
# structure, not just marker identity, so partially transferred text gets a
# graded score rather than a saturated one.
DETECTOR_ROSTER = (
    ("det0_train", "bigram_logistic", 0),
    ("det1_attention", "attention", 11),
    ("det2_meanpool", "meanpool_mlp", 12),
    ("det3_meanpool", "meanpool_mlp", 13),
)
TRAINING_DETECTOR = "det0_train"


@dataclass
class DeskConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    eval_per_domain: int = 900          # generated per domain before filtering
    eval_size: int = 1000
    model: DiTConfig = field(default_factory=DiTConfig)
    encoder_lm: TinyLMConfig = field(default_factory=lambda: TinyLMConfig(width=128))
    neutral_lm: TinyLMConfig = field(default_factory=lambda: TinyLMConfig(width=64))
    encoder_steps: int = 3000
    neutral_steps: int = 2000
    split_layer: int = 2
    detector_steps: int | None = None   # per-architecture defaults when None
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep_gammas: tuple[float, ...] = (1.0, 2.0, 3.0, 4.0, 5.0, 6.0)
    select_gamma: float = 4.0           # 4th of 6 grid points for checkpoint selection
    sampler_steps: int = 16
    audit_targets: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
    audit_docs: int = 5
    audit_texts_per_doc: int = 50
    audit_epsilon: float = 0.02
    seed: int = 0

    def stage_fp(self, *parts) -> str:
        return fingerprint({"parts": [asdict(p) if hasattr(p, "__dataclass_fields__") else p
                                      for p in parts]})


def default_cache_dir() -> Path:
    return Path(os.environ.get("FLOWSTYLE_CACHE", ".flowstyle_cache"))


@dataclass
class DeskArtifacts:
    """Paths plus lazily loaded objects for everything the desk run produced."""

    root: Path
    manifest: Manifest
    timings: dict[str, float]

    def _load(self, name):
        entry = self.manifest.get(name)
        if entry is None:
            raise KeyError(f"artifact {name!r} not in manifest")
        return Path(entry["path"])

    def train_pairs(self) -> list[StylePair]:
        return load_pairs(self._load("corpus_filtered"))

    def eval_pairs(self) -> list[StylePair]:
        return load_pairs(self._load("corpus_eval"))

    def detectors(self) -> dict[str, ToyDetector]:
        return {name: load_detector(self._load(f"detector_{name}"))[0]
                for name, _, _ in DETECTOR_ROSTER}

    def encoder(self, split_layer: int) -> SemanticEncoder:
        lm, _ = load_lm(self._load("encoder_lm"))
        return SemanticEncoder(lm, split_layer)

    def neutral_lm(self) -> TinyLM:
        return load_lm(self._load("neutral_lm"))[0]

    def model(self) -> StyleTransferModel:
        return load_model(self._load("model_selected"))[0]

    def a5_model(self) -> StyleTransferModel:
        return load_model(self._load("model_a5_selected"))[0]

    def sweep_rows(self) -> list[dict]:
        with open(self._load("sweep_csv")) as f:
            return list(csv.DictReader(f))

    def a5_sweep_rows(self) -> list[dict]:
        with open(self._load("a5_sweep_csv")) as f:
            return list(csv.DictReader(f))

    def reference_report_rows(self) -> list[dict]:
        with open(self._load("reference_csv")) as f:
            return list(csv.DictReader(f))

    def audit_rows(self) -> list[dict]:
        with open(self._load("rateaudit_csv")) as f:
            return list(csv.DictReader(f))


class DeskRunner:
    def __init__(self, cfg: DeskConfig, root: str | Path | None = None, progress=print):
        self.cfg = cfg
        self.root = Path(root) if root else default_cache_dir() / f"desk_{fingerprint(asdict(cfg))}"
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = Manifest(self.root)
        self.progress = progress or (lambda *_: None)
        self.timings: dict[str, float] = {}
        if (self.root / "timings.json").exists():
            self.timings = json.loads((self.root / "timings.json").read_text())

    def _say(self, msg: str) -> None:
        self.progress(f"[desk] {msg}")

    def _stage(self, name: str, fp: str, produce) -> Path:
        """Run `produce(path) -> extra_meta` unless the cached artifact is current."""
        if self.manifest.has_current(name, fp):
            return Path(self.manifest.get(name)["path"])
        path = self.root / _stage_filename(name)
        t0 = time.time()
        self._say(f"building {name} ...")
        extra = produce(path) or {}
        dt = time.time() - t0
        self.timings[name] = dt
        (self.root / "timings.json").write_text(json.dumps(self.timings, indent=1, sort_keys=True))
        self.manifest.record(name, path, kind=name.split("_")[0], config_fingerprint=fp, **extra)
        self._say(f"{name} done in {dt:.1f}s")
        return path

    # ---- stages ----

    def run(self) -> DeskArtifacts:
        cfg = self.cfg
        fp_corpus = cfg.stage_fp(cfg.corpus, cfg.eval_per_domain, cfg.eval_size, "corpus-v1")

        def make_raw(path):
            pairs = generate_pairs(cfg.corpus)
            save_pairs(pairs, path)
        raw_path = self._stage("corpus_raw", fp_corpus, make_raw)

        def make_raw_eval(path):
            eval_cfg = CorpusConfig(sizes={d: cfg.eval_per_domain for d in ("alpha", "beta", "gamma")},
                                    seed=cfg.corpus.seed + 1)
            save_pairs(generate_pairs(eval_cfg), path)
        raw_eval_path = self._stage("corpus_raw_eval", fp_corpus, make_raw_eval)

        fp_det = cfg.stage_fp(fp_corpus, cfg.detector_steps, "detectors-v1")
        det_paths = {}
        for name, arch, seed in DETECTOR_ROSTER:
            def make_det(path, arch=arch, seed=seed):
                det = train_detector(load_pairs(raw_path), arch, seed, steps=cfg.detector_steps)
                save_detector(path, det)
                return {"holdout_accuracy": det.holdout_accuracy}
            det_paths[name] = self._stage(f"detector_{name}", fp_det, make_det)
        det0, _ = load_detector(det_paths[TRAINING_DETECTOR])

        fp_filtered = cfg.stage_fp(fp_det, "filter-v1")

        def make_filtered(path):
            kept, rejects = score_and_filter(load_pairs(raw_path), det0)
            save_pairs(kept, path)
            return {"kept": len(kept), "rejects": rejects}
        filtered_path = self._stage("corpus_filtered", fp_filtered, make_filtered)

        def make_eval(path):
            kept, _ = score_and_filter(load_pairs(raw_eval_path), det0)
            by_domain: dict[str, list[StylePair]] = {"alpha": [], "beta": [], "gamma": []}
            for p in kept:
                by_domain[p.domain].append(p)
            per = cfg.eval_size // 3
            counts = {"alpha": cfg.eval_size - 2 * per, "beta": per, "gamma": per}
            chosen: list[StylePair] = []
            for d, n in counts.items():
                if len(by_domain[d]) < n:
                    raise RuntimeError(f"not enough filtered eval pairs in domain {d}: {len(by_domain[d])} < {n}")
                chosen.extend(by_domain[d][:n])
            save_pairs(chosen, path)
        eval_path = self._stage("corpus_eval", fp_filtered, make_eval)

        def vocab_stage(path):
            save_vocab(path)
        self._stage("vocab", fingerprint({"vocab": "v1"}), vocab_stage)

        train_pairs = load_pairs(filtered_path)
        mixed = [p.ai_seq.ids for p in train_pairs] + [p.human_seq.ids for p in train_pairs]

        fp_enc = cfg.stage_fp(fp_filtered, cfg.encoder_lm, cfg.encoder_steps, "enc-v1")

        def make_encoder(path):
            lm = train_lm(cfg.encoder_lm, mixed, steps=cfg.encoder_steps, seed=cfg.seed + 100,
                          progress=lambda s, l: self._say(f"  encoder {s} nll {l:.3f}"))
            lm.freeze()
            save_lm(path, lm)
        enc_path = self._stage("encoder_lm", fp_enc, make_encoder)

        fp_neutral = cfg.stage_fp(fp_filtered, cfg.neutral_lm, cfg.neutral_steps, "neutral-v1")

        def make_neutral(path):
            lm = train_lm(cfg.neutral_lm, mixed, steps=cfg.neutral_steps, seed=cfg.seed + 200,
                          progress=lambda s, l: self._say(f"  neutral {s} nll {l:.3f}"))
            lm.freeze()
            save_lm(path, lm)
        self._stage("neutral_lm", fp_neutral, make_neutral)

        fp_pre = cfg.stage_fp(fp_filtered, cfg.model, cfg.pretrain, "pretrain-v1")

        def make_pretrained(path):
            model = StyleTransferModel(cfg.model, seed=cfg.seed)
            pretrain_backbone(cfg.pretrain, train_pairs, model,
                              progress=lambda s, l: self._say(f"  pretrain {s} loss {l:.3f}"))
            save_train_checkpoint(path, model, 0, fp_pre, {}, {})
        pre_path = self._stage("model_pretrained", fp_pre, make_pretrained)

        encoder = SemanticEncoder(load_lm(enc_path)[0], cfg.split_layer)
        eval_pairs = load_pairs(eval_path)

        self._train_variant("model", cfg.train, cfg.split_layer, pre_path, fp_pre,
                            train_pairs, eval_pairs, det0, encoder)
        a5_cfg, a5_layer, _ = apply_ablation(cfg.train, cfg.split_layer, "a5")
        self._train_variant("model_a5", a5_cfg, a5_layer, pre_path, fp_pre,
                            train_pairs, eval_pairs, det0, encoder)

        detectors = {name: load_detector(det_paths[name])[0] for name, _, _ in DETECTOR_ROSTER}
        neutral = load_lm(self.manifest.get("neutral_lm")["path"])[0]

        fp_sweep = cfg.stage_fp(self.manifest.get("model_selected")["fingerprint"],
                                cfg.sweep_gammas, cfg.sampler_steps, cfg.eval_size, "sweep-v2")
        self._sweep_stage("sweep_csv", "pareto_csv", fp_sweep, self._selected_model("model_selected"),
                          detectors, encoder, neutral, eval_pairs, use_condition=True)
        fp_a5_sweep = cfg.stage_fp(self.manifest.get("model_a5_selected")["fingerprint"],
                                   cfg.sweep_gammas, cfg.sampler_steps, cfg.eval_size, "sweep-a5-v2")
        self._sweep_stage("a5_sweep_csv", None, fp_a5_sweep, self._selected_model("model_a5_selected"),
                          detectors, encoder, neutral, eval_pairs, use_condition=False)

        def make_reference(path):
            rows = reference_rows(detectors, encoder, neutral, eval_pairs, seed=cfg.seed)
            emit_report_csv(rows, path)
            (self.root / "reference_table.txt").write_text(
                format_report_table(rows, TRAINING_DETECTOR) + "\n")
        self._stage("reference_csv", cfg.stage_fp(fp_sweep, "reference-v1"), make_reference)

        self._audit_stage(det0, encoder, eval_pairs)

        return DeskArtifacts(self.root, self.manifest, self.timings)

    def _selected_model(self, name: str) -> StyleTransferModel:
        return load_model(self.manifest.get(name)["path"])[0]

    def _train_variant(self, tag: str, tcfg: TrainConfig, split_layer: int, pre_path: Path,
                       fp_pre: str, train_pairs, eval_pairs, det0, encoder) -> None:
        cfg = self.cfg
        fp_train = cfg.stage_fp(fp_pre, tcfg, split_layer, "train-v1")
        run_dir = self.root / f"{tag}_run"
        enc = SemanticEncoder(encoder.lm, split_layer)

        def make_trained(path):
            model, _ = load_model(pre_path)
            t0 = time.time()
            result = train(tcfg, train_pairs, model, det0, enc if tcfg.use_condition else None,
                           run_dir, fingerprint=fp_train,
                           progress=lambda s, l: self._say(f"  {tag} train {s} loss {l:.3f}"))
            wall = time.time() - t0
            final = Path(result["final"])
            path.write_bytes(final.read_bytes())
            return {"checkpoints": [str(p) for p in result["checkpoints"]],
                    "train_wall_seconds": wall}
        trained_path = self._stage(f"{tag}_trained", fp_train, make_trained)

        fp_sel = cfg.stage_fp(fp_train, cfg.select_gamma, cfg.sampler_steps, "select-v1")

        def make_selected(path):
            ckpts = [p for p in self.manifest.get(f"{tag}_trained")["checkpoints"]
                     if Path(p).exists()]
            if not ckpts:
                ckpts = [str(trained_path)]
            best, rows = select_checkpoint(ckpts, eval_pairs, det0, enc, cfg.select_gamma,
                                           cfg.sampler_steps, use_condition=tcfg.use_condition)
            path.write_bytes(Path(best).read_bytes())
            return {"selection": rows, "winner": str(best)}
        self._stage(f"{tag}_selected", fp_sel, make_selected)

    def _sweep_stage(self, name: str, pareto_name: str | None, fp: str, model,
                     detectors, encoder, neutral, eval_pairs, use_condition: bool) -> None:
        cfg = self.cfg

        def make_sweep(path):
            sweep = run_sweep(model, detectors, encoder, neutral, eval_pairs,
                              list(cfg.sweep_gammas), cfg.sampler_steps,
                              use_condition=use_condition, seed=cfg.seed)
            emit_sweep_csv(sweep, path)
            if pareto_name:
                pareto_path = self.root / _stage_filename(pareto_name)
                emit_pareto_csv(sweep, TRAINING_DETECTOR, pareto_path)
                self.manifest.record(pareto_name, pareto_path, kind="pareto", config_fingerprint=fp)
        self._stage(name, fp, make_sweep)

    def _audit_stage(self, det0, encoder, eval_pairs) -> None:
        cfg = self.cfg
        model = self._selected_model("model_selected")
        fp = cfg.stage_fp(self.manifest.get("model_selected")["fingerprint"],
                          cfg.audit_targets, cfg.audit_docs, cfg.audit_texts_per_doc,
                          cfg.audit_epsilon, "audit-v1")

        def make_audit(path):
            ladder = tuple(sorted(cfg.sweep_gammas)[-4:])
            rows = []
            for d in range(cfg.audit_docs):
                lo = d * cfg.audit_texts_per_doc
                texts = [p.ai_seq.ids for p in eval_pairs[lo:lo + cfg.audit_texts_per_doc]]
                doc = TokenSequence(np.concatenate(texts))
                for target in cfg.audit_targets:
                    plan = AuditPlan(target, cfg.audit_epsilon, ladder, cfg.model.s_max)
                    _, report = run_audit(doc, plan, model, det0, encoder,
                                          cfg.sampler_steps, seed=cfg.seed)
                    rows.append({
                        "doc": d, "target": target, "achieved": report.achieved,
                        "chunks_rewritten": report.chunks_rewritten,
                        "total_chunks": len(report.weights),
                        "rewrite_ratio": report.rewrite_ratio,
                        "iterations": report.iterations, "status": report.status,
                        "overshoot": report.overshoot,
                        "self_consistent": report.recomputed_achieved() == report.achieved,
                    })
                    self._say(f"  audit doc {d} target {target}: achieved {report.achieved:.3f}")
            with open(path, "w", newline="") as f:
                w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
                w.writeheader()
                w.writerows(rows)
        self._stage("rateaudit_csv", fp, make_audit)


def _stage_filename(name: str) -> str:
    table = {
        "corpus_raw": "corpus_raw.tsv", "corpus_raw_eval": "corpus_raw_eval.tsv",
        "corpus_filtered": "corpus_train.tsv", "corpus_eval": "corpus_eval.tsv",
        "vocab": "vocab.txt", "encoder_lm": "encoder_lm.bin", "neutral_lm": "neutral_lm.bin",
        "model_pretrained": "model_pretrained.bin",
        "model_trained": "model_trained.bin", "model_selected": "model_selected.bin",
        "model_a5_trained": "model_a5_trained.bin", "model_a5_selected": "model_a5_selected.bin",
        "sweep_csv": "sweep.csv", "a5_sweep_csv": "sweep_a5.csv", "pareto_csv": "pareto.csv",
        "reference_csv": "reference.csv", "rateaudit_csv": "rateaudit.csv",
    }
    if name.startswith("detector_"):
        return name + ".bin"
    return table[name]


def run_desk_experiment(cfg: DeskConfig | None = None, root: str | Path | None = None,
                        progress=print) -> DeskArtifacts:
    return DeskRunner(cfg or DeskConfig(), root, progress).run()
