"""Paired speech/text utterances and the five-pattern interleaver."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError, ResampleSignal
from .layout import VocabLayout
from .markov import MarkovSource, sample_stream

PATTERNS = (("S",), ("T",), ("S", "T"), ("T", "S"), ("S", "T", "S"))
PATTERN_NAMES = ("[Speech]", "[Text]", "[Speech][Text]", "[Text][Speech]", "[Speech][Text][Speech]")

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class PairedUtterance:
    speech_tokens: np.ndarray
    word_boundaries: tuple[int, ...]
    text_tokens: np.ndarray
    style_id: int

    @property
    def n_words(self) -> int:
        return len(self.word_boundaries)

    def word_slices(self) -> list[slice]:
        starts = (0,) + self.word_boundaries[:-1]
        return [slice(a, b) for a, b in zip(starts, self.word_boundaries)]


def word_boundaries(length: int, word_len: int = 5) -> tuple[int, ...]:
    """Word ends every ``word_len`` tokens; a short final word is kept."""
    if length < 1 or word_len < 1:
        raise DomainError("length and word_len must be positive")
    ends = list(range(word_len, length, word_len))
    return tuple(ends + [length])


def check_boundaries(boundaries, length: int) -> tuple[int, ...]:
    b = tuple(int(x) for x in boundaries)
    if not b or b[-1] != length or b[0] <= 0 or any(x >= y for x, y in zip(b, b[1:])):
        raise DomainError(f"word boundaries must ascend strictly from >0 to the length {length}")
    return b


def _fnv1a(ids) -> int:
    h = _FNV_OFFSET
    for tok in ids:
        for byte in int(tok).to_bytes(2, "little"):
            h = ((h ^ byte) * _FNV_PRIME) & _MASK
    return h


def transcribe(utt_tokens, boundaries, layout: VocabLayout) -> np.ndarray:
    """One text token per word: FNV-1a of the word's ids, folded into the text range."""
    x = np.asarray(utt_tokens, dtype=np.int64)
    b = check_boundaries(boundaries, x.shape[0])
    starts = (0,) + b[:-1]
    t0 = layout.start("text")
    return np.array([t0 + _fnv1a(x[a:e]) % layout.n_text for a, e in zip(starts, b)], dtype=np.int64)


def make_utterance(source: MarkovSource, layout: VocabLayout, length: int, seed: int, word_len: int = 5,
                   style_index: int = 0) -> PairedUtterance:
    speech = sample_stream(source, length, seed)
    bounds = word_boundaries(length, word_len)
    return PairedUtterance(speech, bounds, transcribe(speech, bounds, layout), layout.style_token(style_index))


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.shape != (5,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise DomainError("pattern_probs must be 5 non-negative numbers summing to 1")
    return p / p.sum()


def interleave(utt: PairedUtterance, pattern_probs, layout: VocabLayout, seed: int, return_pattern: bool = False):
    """Draw a pattern, cut the utterance at word boundaries into that many
    spans, and render each span in its modality behind a marker token."""
    p = _check_probs(pattern_probs)
    rng = np.random.default_rng(seed)
    k = int(rng.choice(5, p=p))
    modes = PATTERNS[k]
    n = utt.n_words
    if n < len(modes):
        raise ResampleSignal(f"{n} words cannot fill pattern {PATTERN_NAMES[k]}")
    cuts = np.sort(rng.choice(np.arange(1, n), size=len(modes) - 1, replace=False)) if len(modes) > 1 else []
    edges = [0, *[int(c) for c in cuts], n]
    words = utt.word_slices()
    out = []
    for mode, a, e in zip(modes, edges, edges[1:]):
        if mode == "S":
            out.append(layout.speech_marker)
            out.extend(utt.speech_tokens[words[a].start : words[e - 1].stop].tolist())
        else:
            out.append(layout.text_marker)
            out.extend(utt.text_tokens[a:e].tolist())
    seq = np.asarray(out, dtype=np.int64)
    return (seq, k) if return_pattern else seq


def parse_spans(seq, layout: VocabLayout) -> list[tuple[str, np.ndarray]]:
    """Split an interleaved sequence into (modality, tokens) spans."""
    spans = []
    for tok in np.asarray(seq).tolist():
        if tok in (layout.speech_marker, layout.text_marker):
            spans.append(("S" if tok == layout.speech_marker else "T", []))
        elif not spans:
            raise DomainError("interleaved sequence must start with a marker")
        else:
            spans[-1][1].append(tok)
    return [(m, np.asarray(t, dtype=np.int64)) for m, t in spans]
