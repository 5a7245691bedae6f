"""Perplexity, oracle-normalized perplexity, and two-choice accuracies.

Scorers accept either a model that ``forward`` can run (plain or adapted
transformers) or any object exposing ``next_token_logprobs(tokens)``
returning a [..., T, V] table, such as :class:`MarkovOracle`.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DomainError, UsageError
from .numerics import kernels, no_grad
from .transformer import forward

EVAL_BATCH_TOKENS = 8192


class MarkovOracle:
    """Predicts with the true transition rows of a Markov source."""

    def __init__(self, source, vocab_size: int | None = None):
        self.source = source
        v = source.vocab_size
        self.vocab_size = vocab_size or v
        table = np.full((v, self.vocab_size), -np.inf)
        table[:, :v] = source.log_transition()
        self._table = table

    def next_token_logprobs(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.source.vocab_size):
            raise DomainError("oracle only scores tokens inside its source's range")
        return self._table[ids]


def _is_transformer(model) -> bool:
    return hasattr(model, "params") and hasattr(model, "config") and hasattr(model, "adapters")


def _by_length(seqs):
    groups = defaultdict(list)
    for i, s in enumerate(seqs):
        groups[len(s)].append(i)
    return sorted(groups.items())


def position_nll(model, seqs) -> list[np.ndarray]:
    """Per-sequence arrays of -log P(s[t] | s[<t]) for t >= 1."""
    seqs = [np.asarray(s, dtype=np.int64) for s in seqs]
    out: list = [None] * len(seqs)
    for length, idx in _by_length(seqs):
        if length < 2:
            raise UsageError("every scored sequence needs at least 2 tokens")
        per_batch = max(1, EVAL_BATCH_TOKENS // length)
        for start in range(0, len(idx), per_batch):
            chunk = idx[start : start + per_batch]
            batch = np.stack([seqs[i] for i in chunk])
            if _is_transformer(model):
                with no_grad():
                    logits = forward(model, batch[:, :-1]).logits.data
                v = logits.shape[-1]
                nll, _ = kernels.active.cross_entropy_rows(logits.reshape(-1, v), batch[:, 1:].reshape(-1))
                nll = nll.reshape(len(chunk), length - 1)
            else:
                table = model.next_token_logprobs(batch)
                nll = -np.take_along_axis(table[:, :-1, :], batch[:, 1:, None], axis=-1)[..., 0]
            for row, i in enumerate(chunk):
                out[i] = nll[row]
    return out


def _dtype_of(model):
    return model.dtype if _is_transformer(model) else np.float64


def mean_cross_entropy(model, corpus) -> tuple[float, int]:
    seqs = list(corpus)
    if not seqs:
        raise UsageError("corpus is empty")
    per = position_nll(model, seqs)
    total = 0.0
    n = 0
    for arr in per:
        total += float(arr.sum(dtype=np.float64))
        n += arr.shape[0]
    ce = float(np.asarray(total / n, dtype=_dtype_of(model)))
    return ce, n


def perplexity(model, corpus) -> float:
    """exp of the mean next-token cross entropy over all scored positions."""
    ce, _ = mean_cross_entropy(model, corpus)
    return math.exp(ce)


def nps_from_ce(ce: float, oracle_entropy: float) -> float:
    return max(min(1.0, math.exp(oracle_entropy - ce)), np.nextafter(0.0, 1.0))


def nps(model, corpus, oracle_entropy: float) -> float:
    """min(1, exp(H_oracle - H_model)); 1 means oracle-equivalent."""
    ce, _ = mean_cross_entropy(model, corpus)
    return nps_from_ce(ce, oracle_entropy)


def continuation_scores(model, items) -> tuple[np.ndarray, np.ndarray]:
    """Summed log-probabilities of each item's correct and distractor endings
    given its context."""
    items = list(items)
    if not items:
        raise UsageError("item list is empty")
    seqs = []
    for it in items:
        seqs.append(np.concatenate([it.context, it.correct]))
        seqs.append(np.concatenate([it.context, it.distractor]))
    nll = position_nll(model, seqs)
    good = np.empty(len(items))
    bad = np.empty(len(items))
    for i, it in enumerate(items):
        k = len(it.correct)
        good[i] = -float(nll[2 * i][-k:].sum(dtype=np.float64))
        bad[i] = -float(nll[2 * i + 1][-k:].sum(dtype=np.float64))
    return good, bad


def accuracy_from_scores(good, bad) -> float:
    """Fraction of strict wins; ties count as incorrect."""
    good, bad = np.asarray(good), np.asarray(bad)
    return float(np.mean(good > bad))


def preference_accuracy(model, items) -> float:
    return accuracy_from_scores(*continuation_scores(model, items))


def style_accuracy(model, items) -> float:
    return accuracy_from_scores(*continuation_scores(model, items))


@dataclass
class EvalReport:
    model_id: str
    corpus_id: str
    perplexity: float
    nps: float | None
    preference_accuracy: float | None
    style_accuracy: float | None
    n_tokens: int
    n_items: int
    oracle_entropy: float | None = None

    def to_dict(self):
        return asdict(self)


def evaluate(model, model_id: str, corpus, corpus_id: str, oracle_entropy: float | None = None,
             cloze_items=None, style_items=None) -> EvalReport:
    ce, n_tok = mean_cross_entropy(model, corpus)
    pref = preference_accuracy(model, cloze_items) if cloze_items else None
    sty = style_accuracy(model, style_items) if style_items else None
    n_items = (len(cloze_items) if cloze_items else 0) + (len(style_items) if style_items else 0)
    return EvalReport(
        model_id=model_id,
        corpus_id=corpus_id,
        perplexity=math.exp(ce),
        nps=nps_from_ce(ce, oracle_entropy) if oracle_entropy is not None else None,
        preference_accuracy=pref,
        style_accuracy=sty,
        n_tokens=n_tok,
        n_items=n_items,
        oracle_entropy=oracle_entropy,
    )


ROLE_ORDER = ("teacher", "distilled", "baseline")


def render_table(reports: list[EvalReport]) -> str:
    """Fixed-width comparison table; teacher, distilled, baseline rows first
    (matched by model_id prefix), any others after in input order."""

    def rank(r):
        for i, role in enumerate(ROLE_ORDER):
            if r.model_id.startswith(role):
                return i
        return len(ROLE_ORDER)

    rows = sorted(reports, key=rank)
    cols = ("model", "ppl", "NPS", "cloze", "style")

    def fmt(v, spec):
        return "-" if v is None else format(v, spec)

    lines = ["{:<18} {:>9} {:>7} {:>7} {:>7}".format(*cols)]
    for r in rows:
        lines.append("{:<18} {:>9} {:>7} {:>7} {:>7}".format(
            r.model_id[:18], fmt(r.perplexity, ".3f"), fmt(r.nps, ".4f"),
            fmt(r.preference_accuracy, ".3f"), fmt(r.style_accuracy, ".3f")))
    return "\n".join(lines)
