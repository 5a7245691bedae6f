"""Pitch and style decoration of phonetic streams."""

from __future__ import annotations

import math

import numpy as np

from ..errors import DomainError
from .layout import VocabLayout
from .markov import MarkovSource, entropy_rate, initial_entropy


def pitch_count(n: int, pitch_period: int) -> int:
    return n // pitch_period


def expressify(tokens, layout: VocabLayout, pitch_period: int, style_id: int, seed: int) -> np.ndarray:
    """Prefix the style token and insert one pitch token before phonetic
    positions p-1, 2p-1, ... . Pitch values are drawn uniformly from the
    style's register, one per window of ``pitch_period`` phonetic tokens."""
    if style_id not in layout.span("style"):
        raise DomainError(f"style id {style_id} is not in the style range")
    if pitch_period < 1:
        raise DomainError("pitch_period must be positive")
    x = np.asarray(tokens, dtype=np.int64)
    if x.size and (x.min() < 0 or x.max() >= layout.n_phonetic):
        raise DomainError("expressify takes phonetic-range tokens")
    reg = layout.register(style_id - layout.start("style"))
    n_pitch = pitch_count(x.shape[0], pitch_period)
    pitches = np.random.default_rng(seed).integers(reg.start, reg.stop, size=n_pitch)
    out = np.empty(1 + x.shape[0] + n_pitch, dtype=np.int64)
    out[0] = style_id
    pos = 1
    for i, tok in enumerate(x):
        if (i + 1) % pitch_period == 0:
            out[pos] = pitches[(i + 1) // pitch_period - 1]
            pos += 1
        out[pos] = tok
        pos += 1
    return out


def strip(tokens, layout: VocabLayout) -> np.ndarray:
    """Drop pitch and style tokens."""
    x = np.asarray(tokens, dtype=np.int64)
    return x[x < layout.n_phonetic]


def swap_register(tokens, layout: VocabLayout, new_style_index: int) -> np.ndarray:
    """Move every pitch token (and any style token) to another style,
    keeping its position inside the register."""
    x = np.asarray(tokens, dtype=np.int64).copy()
    p0, k = layout.start("pitch"), layout.pitch_per_style
    is_pitch = (x >= p0) & (x < p0 + layout.n_pitch)
    x[is_pitch] = p0 + new_style_index * k + (x[is_pitch] - p0) % k
    s0 = layout.start("style")
    x[(x >= s0) & (x < s0 + layout.n_style)] = s0 + new_style_index
    return x


def expressive_entropy(source: MarkovSource, layout: VocabLayout, n_phonetic: int, pitch_period: int) -> float:
    """Mean oracle cross-entropy per predicted position (all but the leading
    style token) of an expressified stream of ``n_phonetic`` tokens: the
    first phonetic token costs H(pi), each transition the entropy rate, and
    each pitch token ln(register size)."""
    w = pitch_count(n_phonetic, pitch_period)
    total = initial_entropy(source) + (n_phonetic - 1) * entropy_rate(source) + w * math.log(layout.pitch_per_style)
    return total / (n_phonetic + w)
