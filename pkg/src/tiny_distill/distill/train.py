"""Optimizer and training loops for plain LM training and distillation."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import ConfigError, NonFiniteError, UsageError
from ..numerics import Tensor, backward, no_grad
from ..transformer import forward, widths_compatible
from .config import DistillConfig, LoraConfig, TrainConfig
from .lora import lora_attach, lora_merge
from .losses import align_loss, lm_loss, output_loss, total_loss


class Adam:
    """Bias-corrected Adam with optional global-norm gradient clipping."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8, grad_clip=1.0):
        self.params = params
        self.beta1, self.beta2, self.eps, self.grad_clip = beta1, beta2, eps, grad_clip
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    @classmethod
    def from_config(cls, params, cfg: TrainConfig) -> "Adam":
        return cls(params, cfg.beta1, cfg.beta2, cfg.eps, cfg.grad_clip)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                g = p.grad.astype(np.float64, copy=False).ravel()
                total += float(g @ g)
        return math.sqrt(total)

    def step(self, lr: float) -> float:
        norm = self.grad_norm()
        clip = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            clip = self.grad_clip / norm
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if clip != 1.0:
                g = g * p.dtype.type(clip)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            p.data -= (lr / c1) * m / denom
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state(self, t: int, arrays: dict[str, np.ndarray]):
        for k, p in self.params.items():
            m, v = arrays.get(f"m.{k}"), arrays.get(f"v.{k}")
            if m is None or v is None or m.shape != p.shape or v.shape != p.shape:
                raise UsageError(f"optimizer state missing or mismatched for {k}")
            self.m[k] = m.astype(p.dtype, copy=True)
            self.v[k] = v.astype(p.dtype, copy=True)
        self.t = int(t)


@dataclass
class TrainingReport:
    stage: str
    config: dict
    records: list[dict] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.records[-1] if self.records else {}

    def series(self, key: str) -> list[float]:
        return [r[key] for r in self.records if key in r]


def as_sequences(corpus) -> list[np.ndarray]:
    """Normalize a corpus (2-d array or iterable of 1-d arrays) to a list."""
    if isinstance(corpus, np.ndarray) and corpus.ndim == 2:
        seqs = list(corpus)
    else:
        seqs = [np.asarray(s) for s in corpus]
    if not seqs:
        raise UsageError("corpus is empty")
    for s in seqs:
        if s.ndim != 1 or s.shape[0] < 2:
            raise UsageError("every corpus sequence needs at least 2 tokens")
    return [s.astype(np.int64, copy=False) for s in seqs]


def sample_batch(seqs: Sequence[np.ndarray], batch_size: int, seq_len: int, rng) -> np.ndarray:
    """Draw ``batch_size`` windows of ``seq_len + 1`` tokens (shorter when a
    drawn sequence is shorter) at uniform random sequences and offsets."""
    idx = rng.integers(0, len(seqs), size=batch_size)
    width = min(seq_len + 1, min(seqs[i].shape[0] for i in idx))
    out = np.empty((batch_size, width), dtype=np.int64)
    for row, i in enumerate(idx):
        s = seqs[i]
        off = int(rng.integers(0, s.shape[0] - width + 1))
        out[row] = s[off : off + width]
    return out


def step_rng(seed: int, step: int):
    return np.random.default_rng([seed, step])


StepCallback = Callable[[int, "dict | None", Adam], None]


def _loop(stage, model, seqs, cfg: TrainConfig, step_fn, optimizer, start_step, callback, config_dict):
    if cfg.seq_len > model.config.max_seq_len:
        raise ConfigError(f"seq_len {cfg.seq_len} exceeds max_seq_len {model.config.max_seq_len}")
    params = model.trainable()
    opt = optimizer if optimizer is not None else Adam.from_config(params, cfg)
    report = TrainingReport(stage, config_dict)
    t0 = time.perf_counter()
    for step in range(start_step, cfg.steps):
        batch = sample_batch(seqs, cfg.batch_size, cfg.seq_len, step_rng(cfg.seed, step))
        log_now = (step + 1) % cfg.log_interval == 0
        opt.zero_grad()
        lr = cfg.lr_at(step)
        try:
            loss, terms = step_fn(batch, log_now)
            backward(loss)
            gnorm = opt.step(lr)
        except NonFiniteError as exc:
            raise NonFiniteError(f"{stage}: step {step} (lr={lr:g}): {exc}") from None
        if not math.isfinite(gnorm):
            raise NonFiniteError(f"{stage}: step {step} (lr={lr:g}): gradient norm is {gnorm}")
        record = None
        if log_now:
            record = {"stage": stage, "step": step + 1, **terms, "lr": lr, "grad_norm": gnorm,
                      "wall_time": round(time.perf_counter() - t0, 4)}
            report.records.append(record)
        if callback is not None:
            callback(step + 1, record, opt)
    return report


def train_lm(model, corpus, cfg: TrainConfig, *, optimizer: Adam | None = None, start_step: int = 0,
             callback: StepCallback | None = None, stage: str = "train_lm") -> TrainingReport:
    """Next-token training with Adam. Works on plain models and LoRA handles."""
    seqs = as_sequences(corpus)

    def step_fn(batch, log_now):
        logits = forward(model, batch[:, :-1]).logits
        loss = lm_loss(logits, batch[:, 1:])
        return loss, {"lm": float(loss.data)}

    return _loop(stage, model, seqs, cfg, step_fn, optimizer, start_step, callback, cfg.to_dict())


def distill_train(teacher, student, corpus, dcfg: DistillConfig, tcfg: TrainConfig, *,
                  optimizer: Adam | None = None, start_step: int = 0,
                  callback: StepCallback | None = None) -> TrainingReport:
    """Train ``student`` on the weighted align/output/LM objective against a
    frozen ``teacher``. Zero-weighted terms are evaluated without gradients,
    and only on logging steps."""
    if not widths_compatible(teacher.config, student.config):
        raise ConfigError("teacher and student must share vocab, d_model, n_heads and rope_base")
    dcfg = dcfg.resolved(student.config.n_layers)
    dcfg.layer_map.validate(student.config.n_layers, teacher.config.n_layers)
    seqs = as_sequences(corpus)
    l1, l2, l3 = dcfg.lambdas

    def step_fn(batch, log_now):
        x, y = batch[:, :-1], batch[:, 1:]
        with no_grad():
            tt = forward(teacher, x, hidden=True, attention=True)
        st = forward(student, x, hidden=True, attention=True)
        terms = {}
        graded = {}
        for key, lam, fn in (
            ("align", l1, lambda: align_loss(tt, st, dcfg)),
            ("output", l2, lambda: output_loss(tt.logits, st.logits, dcfg.tau, dcfg.tau_sq_scale)),
            ("lm", l3, lambda: lm_loss(st.logits, y)),
        ):
            if lam > 0:
                graded[key] = fn()
                terms[key] = float(graded[key].data)
            elif log_now:
                with no_grad():
                    terms[key] = float(fn().data)
        loss = total_loss(graded.get("align", 0.0), graded.get("output", 0.0), graded.get("lm", 0.0), dcfg)
        terms["total"] = float(loss.data) if log_now else 0.0
        return loss, terms

    config = {"distill": dcfg.to_dict(), "train": tcfg.to_dict()}
    return _loop("distill", student, seqs, tcfg, step_fn, optimizer, start_step, callback, config)


def teacher_correct(teacher, target_corpus, lcfg: LoraConfig, tcfg: TrainConfig, *,
                    callback: StepCallback | None = None, return_report: bool = False):
    """LoRA-adapt ``teacher`` to ``target_corpus`` and fold the adapters in."""
    handle = lora_attach(teacher, lcfg, seed=tcfg.seed)
    report = train_lm(handle, target_corpus, tcfg, callback=callback, stage="correct_teacher")
    merged = lora_merge(handle)
    return (merged, report) if return_report else merged
