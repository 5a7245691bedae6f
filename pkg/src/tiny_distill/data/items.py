"""Two-choice evaluation items: coherent-ending cloze and style consistency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DomainError
from .expressive import expressify, swap_register
from .layout import VocabLayout
from .markov import MarkovSource, sample_stream


@dataclass(frozen=True)
class ClozeItem:
    context: np.ndarray
    correct: np.ndarray
    distractor: np.ndarray

    def __post_init__(self):
        if len(self.correct) != len(self.distractor) or len(self.correct) < 1:
            raise DomainError("continuations must be non-empty and of equal length")

    def to_dict(self):
        return {k: getattr(self, k).tolist() for k in ("context", "correct", "distractor")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], dtype=np.int64) for k in ("context", "correct", "distractor")))


StyleItem = ClozeItem


def build_cloze(source: MarkovSource, n_items: int, ctx_len: int, cont_len: int, seed: int) -> list[ClozeItem]:
    """Context and correct ending form one trajectory; the distractor is an
    independent trajectory from a uniformly drawn state."""
    if ctx_len < 1 or cont_len < 1 or n_items < 0:
        raise DomainError("lengths must be positive")
    rng = np.random.default_rng(seed)
    items = []
    while len(items) < n_items:
        s1, s2 = rng.integers(0, 2**63, size=2)
        traj = sample_stream(source, ctx_len + cont_len, int(s1))
        start = int(rng.integers(0, source.vocab_size))
        dis = sample_stream(source, cont_len, int(s2), first=start)
        correct = traj[ctx_len:]
        if np.array_equal(correct, dis):
            continue
        items.append(ClozeItem(traj[:ctx_len], correct, dis))
    return items


def build_style_items(source: MarkovSource, layout: VocabLayout, n_items: int, seed: int, ctx_len: int = 30,
                      cont_len: int = 20, pitch_period: int = 5) -> list[ClozeItem]:
    """Expressive trajectories split into context and ending; the distractor
    moves the ending's pitch tokens to a different style's register."""
    if ctx_len < 1 or cont_len < 1:
        raise DomainError("lengths must be positive")
    if layout.n_style < 2:
        raise DomainError("style items need at least two styles")
    if cont_len < pitch_period:
        raise DomainError("cont_len must cover at least one pitch window")
    rng = np.random.default_rng(seed)
    items = []
    while len(items) < n_items:
        s_stream, s_pitch = (int(v) for v in rng.integers(0, 2**63, size=2))
        style = int(rng.integers(0, layout.n_style))
        other = int(rng.integers(0, layout.n_style - 1))
        other += other >= style
        phon = sample_stream(source, ctx_len + cont_len, s_stream)
        expr = expressify(phon, layout, pitch_period, layout.style_token(style), s_pitch)
        # split after the ctx_len-th phonetic token
        cut = 1 + ctx_len + ctx_len // pitch_period
        context, correct = expr[:cut], expr[cut:]
        distractor = swap_register(correct, layout, other)
        items.append(ClozeItem(context, correct, distractor))
    return items
