"""Order-1 Markov token sources with a closed-form entropy rate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DomainError
from ..numerics import kernels


@dataclass(frozen=True, eq=False)
class MarkovSource:
    transition: np.ndarray
    initial: np.ndarray
    seed: int
    concentration: float
    _cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        cdf = np.cumsum(self.transition, axis=1)
        cdf[:, -1] = 1.0
        object.__setattr__(self, "_cdf", np.ascontiguousarray(cdf))
        for arr in (self.transition, self.initial, self._cdf):
            arr.setflags(write=False)

    @property
    def vocab_size(self) -> int:
        return self.transition.shape[0]

    @property
    def cdf(self) -> np.ndarray:
        return self._cdf

    def log_transition(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.transition)


def stationary_distribution(transition: np.ndarray, tol: float = 1e-10, max_squarings: int = 64) -> np.ndarray:
    """Stationary law reached from a uniform start.

    Iterates the lazy chain (P + I) / 2, which shares P's stationary laws but
    is aperiodic, by repeated squaring until successive rows agree to ``tol``.
    """
    v = transition.shape[0]
    lazy = 0.5 * (transition + np.eye(v))
    pi = np.full(v, 1.0 / v)
    power = lazy
    prev = pi @ power
    for _ in range(max_squarings):
        power = power @ power
        power /= power.sum(axis=1, keepdims=True)
        cur = pi @ power
        if np.abs(cur - prev).sum() < tol:
            prev = cur
            break
        prev = cur
    pi = prev
    for _ in range(8):
        pi = pi @ transition
    return pi / pi.sum()


def make_source(seed: int, vocab_size: int, concentration: float) -> MarkovSource:
    """Rows drawn from a symmetric Dirichlet(concentration)."""
    if vocab_size < 2:
        raise DomainError("vocab_size must be at least 2")
    if not concentration > 0:
        raise DomainError("concentration must be positive")
    rng = np.random.default_rng(seed)
    rows = rng.dirichlet(np.full(vocab_size, float(concentration)), size=vocab_size)
    rows /= rows.sum(axis=1, keepdims=True)
    return MarkovSource(rows, stationary_distribution(rows), int(seed), float(concentration))


def source_from_matrix(transition, seed: int = 0) -> MarkovSource:
    p = np.asarray(transition, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1] or p.shape[0] < 2:
        raise DomainError("transition must be a square matrix of size >= 2")
    if np.any(p < 0) or np.max(np.abs(p.sum(axis=1) - 1.0)) > 1e-9:
        raise DomainError("transition rows must be probability vectors")
    return MarkovSource(p.copy(), stationary_distribution(p), int(seed), float("nan"))


def _row_entropy(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


def entropy_rate(source: MarkovSource) -> float:
    """sum_i pi_i H(P[i, :]) in nats per token."""
    return float(source.initial @ _row_entropy(source.transition))


def initial_entropy(source: MarkovSource) -> float:
    return float(_row_entropy(source.initial))


def sample_stream(source: MarkovSource, length: int, seed: int, first: int | None = None) -> np.ndarray:
    """A chain trajectory whose first state is drawn from ``initial`` unless
    ``first`` is given."""
    if length < 1:
        raise DomainError("length must be at least 1")
    rng = np.random.default_rng(seed)
    u0 = rng.random()
    if first is None:
        init_cdf = np.cumsum(source.initial)
        first = min(int(np.searchsorted(init_cdf, u0 * init_cdf[-1], side="right")), source.vocab_size - 1)
    uniforms = rng.random(length - 1)
    return kernels.active.sample_chain(source.cdf, int(first), uniforms)


def chain_logprob(source: MarkovSource, tokens: np.ndarray, prev: int | None = None) -> float:
    """log P(tokens) under the chain; conditioned on ``prev`` when given,
    otherwise the first token is scored under the initial law."""
    tokens = np.asarray(tokens, dtype=np.int64)
    logp = source.log_transition()
    with np.errstate(divide="ignore"):
        head = np.log(source.initial[tokens[0]]) if prev is None else logp[prev, tokens[0]]
    return float(head + logp[tokens[:-1], tokens[1:]].sum())
