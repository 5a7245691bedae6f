"""Synthetic corpora with known entropy, expressive tokens, and interleaving."""

from .expressive import expressify, expressive_entropy, strip, swap_register
from .io import read_corpus, read_items, write_corpus, write_items
from .items import ClozeItem, StyleItem, build_cloze, build_style_items
from .layout import VocabLayout
from .markov import (
    MarkovSource,
    chain_logprob,
    entropy_rate,
    initial_entropy,
    make_source,
    sample_stream,
    source_from_matrix,
    stationary_distribution,
)
from .paired import (
    PATTERN_NAMES,
    PATTERNS,
    PairedUtterance,
    interleave,
    make_utterance,
    parse_spans,
    transcribe,
    word_boundaries,
)

__all__ = [
    "ClozeItem",
    "MarkovSource",
    "PATTERNS",
    "PATTERN_NAMES",
    "PairedUtterance",
    "StyleItem",
    "VocabLayout",
    "build_cloze",
    "build_style_items",
    "chain_logprob",
    "entropy_rate",
    "expressify",
    "expressive_entropy",
    "initial_entropy",
    "interleave",
    "make_source",
    "make_utterance",
    "parse_spans",
    "read_corpus",
    "read_items",
    "sample_stream",
    "source_from_matrix",
    "stationary_distribution",
    "strip",
    "swap_register",
    "transcribe",
    "word_boundaries",
    "write_corpus",
    "write_items",
]
