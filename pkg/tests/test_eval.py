import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiny_distill.data import VocabLayout, build_cloze, build_style_items, entropy_rate, make_source, sample_stream
from tiny_distill.errors import UsageError
from tiny_distill.eval import (
    EvalReport,
    MarkovOracle,
    accuracy_from_scores,
    evaluate,
    nps,
    nps_from_ce,
    perplexity,
    preference_accuracy,
    render_table,
    style_accuracy,
)
from tiny_distill.numerics import cross_entropy
from tiny_distill.transformer import ModelConfig, TransformerLM, forward


@pytest.fixture(scope="module")
def source():
    return make_source(0, 100, 0.01)


def uniform_model(vocab=100, max_len=64):
    m = TransformerLM.init(ModelConfig(vocab, 16, 2, 1, 16, max_len), seed=0)
    m.params["lm_head"].data[:] = 0.0
    return m


def test_uniform_perplexity(source):
    corpus = [sample_stream(source, 40, i) for i in range(20)]
    assert perplexity(uniform_model(), corpus) == pytest.approx(100, abs=0.1)


def test_perplexity_matches_cross_entropy_op(source):
    m = TransformerLM.init(ModelConfig(100, 16, 2, 2, 16, 64), seed=1)
    seq = sample_stream(source, 33, 0)
    ce = cross_entropy(forward(m, seq[:-1]).logits, seq[1:])
    assert perplexity(m, [seq]) == math.exp(float(ce.data))


def test_oracle_perplexity_and_nps(source):
    corpus = [sample_stream(source, 1000, i) for i in range(100)]
    oracle = MarkovOracle(source)
    h = entropy_rate(source)
    assert perplexity(oracle, corpus) == pytest.approx(math.exp(h), rel=0.01)
    assert nps(oracle, corpus, h) == pytest.approx(1.0, abs=0.01)


def test_uniform_nps_closed_form(source):
    corpus = [sample_stream(source, 64, i) for i in range(50)]
    h = entropy_rate(source)
    assert nps(uniform_model(), corpus, h) == pytest.approx(math.exp(h - math.log(100)), abs=0.01)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 50), st.floats(0, 10))
def test_nps_range_and_monotone(ce, h):
    a = nps_from_ce(ce, h)
    b = nps_from_ce(ce + 0.5, h)
    assert 0 < a <= 1 and 0 < b <= 1
    assert b <= a


def test_perplexity_at_least_one(source):
    m = TransformerLM.init(ModelConfig(100, 16, 2, 1, 16, 64), seed=3)
    assert perplexity(m, [sample_stream(source, 20, 0)]) >= 1.0
    with pytest.raises(UsageError):
        perplexity(m, [])


def test_preference_oracle_and_determinism(source):
    items = build_cloze(source, 1000, 30, 20, seed=2)
    oracle = MarkovOracle(source)
    assert preference_accuracy(oracle, items) >= 0.95
    m = TransformerLM.init(ModelConfig(100, 16, 2, 1, 16, 64), seed=0)
    assert preference_accuracy(m, items[:200]) == preference_accuracy(m, items[:200])


def test_near_uniform_model_is_at_chance(source):
    # a freshly initialized model is nearly uniform but not tied
    items = build_cloze(source, 1000, 30, 20, seed=4)
    m = TransformerLM.init(ModelConfig(100, 16, 2, 1, 16, 64), seed=5)
    assert preference_accuracy(m, items) == pytest.approx(0.5, abs=0.04)
    lay = VocabLayout()
    sitems = build_style_items(source, lay, 1000, seed=4)
    ms = TransformerLM.init(ModelConfig(lay.vocab_size, 16, 2, 1, 16, 64), seed=5)
    assert style_accuracy(ms, sitems) == pytest.approx(0.5, abs=0.04)


def test_exactly_uniform_head_ties_count_incorrect(source):
    items = build_cloze(source, 50, 30, 20, seed=4)
    assert preference_accuracy(uniform_model(), items) == 0.0


def test_ties_and_argmax_invariance():
    good = np.array([1.0, 2.0, 3.0, -1.0])
    bad = np.array([1.0, 1.0, 4.0, -2.0])
    assert accuracy_from_scores(good, bad) == 0.5
    assert accuracy_from_scores(np.exp(good), np.exp(bad)) == 0.5
    assert accuracy_from_scores(3 * good + 7, 3 * bad + 7) == 0.5
    with pytest.raises(UsageError):
        preference_accuracy(MarkovOracle(make_source(0, 5, 1.0)), [])


def test_evaluate_report_and_table(source):
    corpus = [sample_stream(source, 40, i) for i in range(10)]
    items = build_cloze(source, 20, 10, 5, seed=0)
    oracle = MarkovOracle(source)
    h = entropy_rate(source)
    reports = [
        evaluate(uniform_model(), "baseline", corpus, "heldout", h, items),
        evaluate(oracle, "teacher", corpus, "heldout", h, items),
        evaluate(oracle, "distilled", corpus, "heldout", h, items),
    ]
    assert isinstance(reports[0], EvalReport)
    d = reports[0].to_dict()
    assert {"nps", "perplexity", "preference_accuracy", "style_accuracy", "n_tokens", "n_items"} <= set(d)
    assert reports[0].n_tokens == 390 and reports[0].n_items == 20
    table = render_table(reports).splitlines()
    assert [line.split()[0] for line in table[1:]] == ["teacher", "distilled", "baseline"]


def test_oracle_handles_batches(source):
    x = np.stack([sample_stream(source, 10, i) for i in range(3)])
    t = MarkovOracle(source).next_token_logprobs(x)
    assert t.shape == (3, 10, 100)
    np.testing.assert_allclose(np.exp(t).sum(-1), 1.0, atol=1e-9)
    wide = MarkovOracle(source, vocab_size=154).next_token_logprobs(x[0])
    assert wide.shape == (10, 154) and np.all(np.isneginf(wide[:, 100:]))

