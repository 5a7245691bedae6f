"""Pipeline stages. Each takes a validated RunConfig and writes into
``<out_dir>/<stage>/`` next to a copy of the resolved config."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from ..data import (
    build_cloze,
    build_style_items,
    entropy_rate,
    expressify,
    expressive_entropy,
    interleave,
    make_source,
    make_utterance,
    read_corpus,
    read_items,
    sample_stream,
    write_corpus,
    write_items,
)
from ..distill import Adam, distill_train, prune_init, teacher_correct, train_lm
from ..errors import ConfigError, ResampleSignal, UsageError
from ..eval import EvalReport, evaluate, perplexity, render_table
from ..transformer import BLOCK_KEYS, TransformerLM
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig

CORPUS_IDS = {"pretrain": 1, "target": 2, "expressive": 3, "interleaved": 4}
MODEL_STAGES = ("teacher", "teacher_corrected", "distilled", "baseline")


# ---------------------------------------------------------------- helpers


def out_path(cfg: RunConfig, *parts) -> Path:
    return Path(cfg.out_dir).joinpath(*parts)


def stage_dir(cfg: RunConfig, stage: str) -> Path:
    d = out_path(cfg, stage)
    d.mkdir(parents=True, exist_ok=True)
    cfg.dump(d / "config.yaml")
    return d


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"missing {what}: {path} (run the earlier stage first)")
    return path


def _corpus(cfg: RunConfig, name: str):
    header, seqs = read_corpus(_require(out_path(cfg, "data", f"{name}.txt"), f"{name} corpus"))
    return header, seqs


class MetricsWriter:
    """Appends one JSON object per line; on resume, keeps only records up to
    the resumed step."""

    def __init__(self, path: Path, resume_step: int | None = None):
        self.path = path
        if resume_step is not None and path.exists():
            kept = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln).get("step", 0) <= resume_step]
            path.write_text("".join(ln + "\n" for ln in kept))
        elif path.exists():
            path.unlink()

    def write(self, record: dict):
        with self.path.open("a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")


def _seeds(run_seed: int, corpus: str, split: int, n: int):
    return [(run_seed, CORPUS_IDS[corpus], split, i) for i in range(n)]


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(cfg: RunConfig, resume: bool = False) -> dict:
    d = cfg.data
    lay = cfg.layout
    out = stage_dir(cfg, "data")
    manifest = {}

    def header(kind, source, ent, **extra):
        return {"kind": kind, "layout": lay.to_dict(), "source_seed": source.seed,
                "concentration": d.concentration, "entropy_rate": ent, **extra}

    sources = {"pretrain": make_source(cfg.source_seed("pretrain"), lay.n_phonetic, d.concentration)}
    if d.target is not None:
        sources["target"] = make_source(cfg.source_seed("target"), lay.n_phonetic, d.concentration)

    for name in ("pretrain", "target"):
        spec = getattr(d, name)
        if spec is None:
            continue
        src = sources[name]
        h = entropy_rate(src)
        for split, n, suffix in ((0, spec.n_sequences, ""), (1, spec.heldout_sequences, "_heldout")):
            seqs = [sample_stream(src, spec.seq_len, s) for s in _seeds(cfg.seed, name, split, n)]
            write_corpus(out / f"{name}{suffix}.txt", seqs, header(name, src, h))
            manifest[name + suffix] = len(seqs)

    src = sources["pretrain"]
    if d.expressive is not None:
        e = d.expressive
        h = expressive_entropy(src, lay, e.phonetic_len, e.pitch_period)
        for split, n, suffix in ((0, e.n_sequences, ""), (1, e.heldout_sequences, "_heldout")):
            rng = np.random.default_rng([cfg.seed, CORPUS_IDS["expressive"], split, 99])
            styles = rng.integers(0, lay.n_style, size=n)
            seqs = []
            for (s, st) in zip(_seeds(cfg.seed, "expressive", split, n), styles):
                phon = sample_stream(src, e.phonetic_len, s)
                seqs.append(expressify(phon, lay, e.pitch_period, lay.style_token(int(st)), seed=hash_seed(s)))
            write_corpus(out / f"expressive{suffix}.txt", seqs,
                         header("expressive", src, h, phonetic_entropy_rate=entropy_rate(src),
                                pitch_period=e.pitch_period))
            manifest["expressive" + suffix] = len(seqs)

    if d.interleaved is not None:
        iv = d.interleaved
        seqs, counts = [], [0] * 5
        for s in _seeds(cfg.seed, "interleaved", 0, iv.n_utterances + iv.heldout_utterances):
            utt = make_utterance(src, lay, iv.utterance_len, hash_seed(s), iv.word_len)
            attempt = 0
            while True:
                try:
                    seq, k = interleave(utt, iv.pattern_probs, lay, hash_seed(s + (attempt,)), return_pattern=True)
                    break
                except ResampleSignal:
                    attempt += 1
            counts[k] += 1
            seqs.append(seq)
        held, seqs = seqs[: iv.heldout_utterances], seqs[iv.heldout_utterances :]
        write_corpus(out / "interleaved.txt", seqs, header("interleaved", src, None, pattern_counts=counts))
        write_corpus(out / "interleaved_heldout.txt", held, header("interleaved", src, None))
        manifest["interleaved"] = len(seqs)
        manifest["interleaved_heldout"] = len(held)

    c = d.cloze
    write_items(out / "cloze.jsonl", build_cloze(src, c.n_items, c.ctx_len, c.cont_len, seed=hash_seed((cfg.seed, 7))))
    manifest["cloze"] = c.n_items
    if d.style is not None:
        s = d.style
        items = build_style_items(src, lay, s.n_items, seed=hash_seed((cfg.seed, 8)), ctx_len=s.ctx_len,
                                  cont_len=s.cont_len, pitch_period=d.expressive.pitch_period)
        write_items(out / "style.jsonl", items)
        manifest["style"] = s.n_items
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def hash_seed(parts) -> int:
    """Stable 63-bit seed from a tuple of ints."""
    h = hashlib.sha256(repr(tuple(int(p) for p in parts)).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


# ---------------------------------------------------------------- training stages


def _train_stage(cfg: RunConfig, stage: str, model: TransformerLM, tcfg, run, resume: bool, meta: dict):
    """Shared checkpoint/metrics plumbing for train-teacher, distill and
    train-baseline. ``run(model, optimizer, start_step, callback)``."""
    d = stage_dir(cfg, stage)
    final, last = d / "model.twck", d / "last.twck"
    if resume and final.exists():
        return load_checkpoint(final, expect_config=model.config).model
    start, opt = 0, None
    if resume and last.exists():
        ck = load_checkpoint(last, expect_config=model.config)
        model = ck.model
        start = int(ck.metadata["step"])
        opt = Adam.from_config(model.trainable(), tcfg)
        opt.load_state(ck.metadata["optimizer_t"], ck.optimizer)
    metrics = MetricsWriter(d / "metrics.jsonl", resume_step=start if resume else None)
    every = cfg.pipeline.checkpoint_every

    def callback(step, record, optimizer):
        if record is not None:
            metrics.write(record)
        if step % every == 0 and step < tcfg.steps:
            save_checkpoint(last, model, {**meta, "stage": stage, "step": step, "optimizer_t": optimizer.t},
                            optimizer.state_arrays())

    run(model, opt, start, callback)
    save_checkpoint(final, model, {**meta, "stage": stage, "step": tcfg.steps})
    if last.exists():
        last.unlink()
    return model


def cmd_train_teacher(cfg: RunConfig, resume: bool = False) -> TransformerLM:
    _, seqs = _corpus(cfg, cfg.pipeline.teacher_corpus)
    tcfg = cfg.train["teacher"]
    model = TransformerLM.init(cfg.teacher, seed=cfg.seed)

    def run(m, opt, start, cb):
        train_lm(m, seqs, tcfg, optimizer=opt, start_step=start, callback=cb, stage="train_teacher")

    return _train_stage(cfg, "teacher", model, tcfg, run, resume, {"seed": cfg.seed})


def cmd_correct_teacher(cfg: RunConfig, resume: bool = False) -> TransformerLM:
    if cfg.data.target is None:
        raise ConfigError("correct-teacher needs a data.target corpus")
    teacher = load_checkpoint(_require(out_path(cfg, "teacher", "model.twck"), "teacher checkpoint"),
                              expect_config=cfg.teacher).model
    _, target = _corpus(cfg, "target")
    _, held = _corpus(cfg, "target_heldout")
    d = stage_dir(cfg, "teacher_corrected")
    metrics = MetricsWriter(d / "metrics.jsonl")
    pre = perplexity(teacher, held)
    tcfg = cfg.train["correct"]
    corrected, report = teacher_correct(teacher, target, cfg.lora, tcfg, return_report=True)
    for rec in report.records:
        metrics.write(rec)
    post = perplexity(corrected, held)
    metrics.write({"stage": "correct_teacher", "step": tcfg.steps, "pre_perplexity": pre, "post_perplexity": post})
    save_checkpoint(d / "model.twck", corrected, {"stage": "teacher_corrected", "seed": cfg.seed, "step": tcfg.steps})
    return corrected


def _distill_teacher(cfg: RunConfig) -> TransformerLM:
    name = cfg.pipeline.distill_teacher
    return load_checkpoint(_require(out_path(cfg, name, "model.twck"), f"{name} checkpoint"),
                           expect_config=cfg.teacher).model


def _sha(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f4").tobytes()).hexdigest()


def cmd_init_student(cfg: RunConfig, resume: bool = False) -> TransformerLM:
    teacher = _distill_teacher(cfg)
    student = prune_init(teacher, cfg.distill.layer_map, cfg.student.n_layers)
    if student.config != cfg.student:
        raise ConfigError("student config must equal the teacher config apart from n_layers")
    d = stage_dir(cfg, "student_init")
    save_checkpoint(d / "model.twck", student, {"stage": "student_init", "seed": cfg.seed, "step": 0})
    with (d / "verify.jsonl").open("w") as f:
        pairs = [(f"layers.{l}.{k}", f"layers.{cfg.distill.layer_map(l)}.{k}", l) for l in range(cfg.student.n_layers)
                 for k in BLOCK_KEYS]
        pairs += [(k, k, None) for k in ("tok_emb", "norm_f", "lm_head")]
        for s_name, t_name, layer in pairs:
            hs, ht = _sha(student.params[s_name].data), _sha(teacher.params[t_name].data)
            f.write(json.dumps({"student": s_name, "teacher": t_name, "student_layer": layer,
                                "teacher_layer": None if layer is None else cfg.distill.layer_map(layer),
                                "sha256": hs, "match": hs == ht}, sort_keys=True) + "\n")
    return student


def cmd_distill(cfg: RunConfig, resume: bool = False) -> TransformerLM:
    teacher = _distill_teacher(cfg)
    student = load_checkpoint(_require(out_path(cfg, "student_init", "model.twck"), "student checkpoint"),
                              expect_config=cfg.student).model
    _, seqs = _corpus(cfg, cfg.pipeline.distill_corpus)
    tcfg = cfg.train["distill"]

    def run(m, opt, start, cb):
        distill_train(teacher, m, seqs, cfg.distill, tcfg, optimizer=opt, start_step=start, callback=cb)

    return _train_stage(cfg, "distilled", student, tcfg, run, resume, {"seed": cfg.seed})


def cmd_train_baseline(cfg: RunConfig, resume: bool = False) -> TransformerLM:
    """Student-sized model trained on hard labels with the distillation
    corpus and budget. Starts from scratch, or from the pruned init when
    ``pipeline.baseline_init`` is "pruned"."""
    _, seqs = _corpus(cfg, cfg.pipeline.distill_corpus)
    tcfg = cfg.train["distill"]
    if cfg.pipeline.baseline_init == "pruned":
        path = _require(out_path(cfg, "student_init", "model.twck"), "student checkpoint")
        model = load_checkpoint(path, expect_config=cfg.student).model
    else:
        model = TransformerLM.init(cfg.student, seed=cfg.seed)

    def run(m, opt, start, cb):
        train_lm(m, seqs, tcfg, optimizer=opt, start_step=start, callback=cb, stage="train_baseline")

    return _train_stage(cfg, "baseline", model, tcfg, run, resume, {"seed": cfg.seed})


# ---------------------------------------------------------------- eval


def cmd_eval(cfg: RunConfig, checkpoints: dict[str, str] | None = None, resume: bool = False) -> list[EvalReport]:
    if checkpoints:
        found = {name: Path(p) for name, p in checkpoints.items()}
        for name, p in found.items():
            _require(p, f"checkpoint {name}")
    else:
        found = {s: out_path(cfg, s, "model.twck") for s in MODEL_STAGES if out_path(cfg, s, "model.twck").exists()}
        if not found:
            raise UsageError(f"no checkpoints found under {cfg.out_dir}")
    names = [cfg.pipeline.teacher_corpus, cfg.pipeline.distill_corpus]
    if cfg.data.target is not None:
        names.append("target")
    corpora = []
    for name in dict.fromkeys(names):
        header, seqs = _corpus(cfg, f"{name}_heldout")
        corpora.append((name, header.get("entropy_rate"), seqs))
    cloze = read_items(_require(out_path(cfg, "data", "cloze.jsonl"), "cloze items"))
    style_path = out_path(cfg, "data", "style.jsonl")
    style = read_items(style_path) if style_path.exists() else None

    reports = []
    for model_id, path in found.items():
        model = load_checkpoint(path).model
        for i, (cname, h, seqs) in enumerate(corpora):
            reports.append(evaluate(model, model_id, seqs, f"{cname}_heldout", h,
                                    cloze if i == 0 else None, style if i == 0 else None))
    d = stage_dir(cfg, "eval")
    with (d / "report.jsonl").open("w") as f:
        for r in reports:
            f.write(json.dumps(_finite(r.to_dict()), sort_keys=True) + "\n")
    table = render_table([r for r in reports if r.corpus_id == f"{corpora[0][0]}_heldout"])
    (d / "table.txt").write_text(table + "\n")
    return reports


def _finite(d: dict) -> dict:
    return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-teacher": cmd_train_teacher,
    "correct-teacher": cmd_correct_teacher,
    "init-student": cmd_init_student,
    "distill": cmd_distill,
    "train-baseline": cmd_train_baseline,
    "eval": cmd_eval,
}

__all__ = ["COMMANDS", "MetricsWriter", "hash_seed"] + [f.__name__ for f in COMMANDS.values()]
