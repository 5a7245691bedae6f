import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiny_distill.errors import ConfigError, DomainError, LengthError
from tiny_distill.numerics import Tensor, cross_entropy
from tiny_distill.numerics.gradcheck import check_gradients
from tiny_distill.transformer import (
    ModelConfig,
    TransformerLM,
    forward,
    generate,
    position_logprobs,
    sequence_logprob,
    widths_compatible,
)

SMALL = ModelConfig(vocab_size=11, d_model=16, n_heads=2, n_layers=2, d_ff=24, max_seq_len=12)


@pytest.fixture(scope="module")
def model():
    return TransformerLM.init(SMALL, seed=3)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=10, d_model=15, n_heads=2, n_layers=1, d_ff=8, max_seq_len=4)
    with pytest.raises(ConfigError):
        ModelConfig(vocab_size=0, d_model=16, n_heads=2, n_layers=1, d_ff=8, max_seq_len=4)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**SMALL.to_dict(), "dropout": 0.1})
    assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL


def test_param_count_is_function_of_config():
    a = TransformerLM.init(SMALL, seed=0)
    b = TransformerLM.init(SMALL, seed=1)
    assert a.param_count() == b.param_count() == SMALL.param_count()
    d, f, v, n = 16, 24, 11, 2
    assert SMALL.param_count() == 2 * v * d + d + n * (4 * d * d + 3 * d * f + 2 * d)


def test_init_is_seeded():
    a = TransformerLM.init(SMALL, seed=5)
    b = TransformerLM.init(SMALL, seed=5)
    for k in a.params:
        assert np.array_equal(a.params[k].data, b.params[k].data)


def test_single_token(model):
    tr = forward(model, np.array([4]), hidden=True, attention=True)
    assert tr.logits.shape == (1, SMALL.vocab_size)
    assert len(tr.attention_maps) == SMALL.n_layers
    for a in tr.attention_maps:
        assert a.shape == (SMALL.n_heads, 1, 1)
        assert np.all(a.data == 1.0)


def test_trace_shapes(model):
    tr = forward(model, np.arange(7) % 11, hidden=True, attention=True)
    assert len(tr.hidden_states) == SMALL.n_layers
    assert tr.hidden_states[0].shape == (7, SMALL.d_model)
    assert tr.attention_maps[0].shape == (SMALL.n_heads, 7, 7)
    bare = forward(model, np.arange(7) % 11)
    assert bare.hidden_states == [] and bare.attention_maps == []
    assert np.array_equal(bare.logits.data, tr.logits.data)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 10), min_size=2, max_size=12), st.data())
def test_causality(model, tokens, data):
    toks = np.array(tokens)
    t = data.draw(st.integers(0, len(toks) - 2))
    other = toks.copy()
    other[t + 1 :] = (other[t + 1 :] + data.draw(st.integers(1, 10))) % 11
    a = forward(model, toks).logits.data
    b = forward(model, other).logits.data
    assert np.array_equal(a[: t + 1], b[: t + 1])


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 10), min_size=1, max_size=12))
def test_attention_row_stochastic(model, tokens):
    tr = forward(model, np.array(tokens), attention=True)
    n = len(tokens)
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    for a in tr.attention_maps:
        assert np.allclose(a.data.sum(-1), 1.0, atol=1e-5)
        assert np.all(a.data[:, upper] == 0.0)


def test_batched_matches_single(model):
    rng = np.random.default_rng(0)
    batch = rng.integers(0, 11, size=(3, 9))
    full = forward(model, batch).logits.data
    for i in range(3):
        np.testing.assert_allclose(full[i], forward(model, batch[i]).logits.data, atol=1e-6)


def test_forward_errors(model):
    with pytest.raises(LengthError):
        forward(model, np.zeros(13, dtype=np.int64))
    with pytest.raises(DomainError):
        forward(model, np.array([0, 11]))
    with pytest.raises(DomainError):
        forward(model, np.array([0.5, 1.0]))
    with pytest.raises(LengthError):
        forward(model, np.zeros(0, dtype=np.int64))


def brute_logprob(model, toks):
    logits = forward(model, toks).logits.data.astype(np.float64)
    total = 0.0
    for t in range(1, len(toks)):
        row = logits[t - 1]
        m = max(row)
        lse = m + math.log(sum(math.exp(x - m) for x in row))
        total += row[toks[t]] - lse
    return total


def test_sequence_logprob_two_tokens(model):
    toks = np.array([3, 7])
    logits = forward(model, toks).logits
    ce = cross_entropy(Tensor(logits.data[:1]), np.array([7]))
    assert sequence_logprob(model, toks) == pytest.approx(-float(ce.data), abs=1e-6)


def test_sequence_logprob_brute_force(model):
    toks = np.array([1, 9, 4, 4, 0])
    assert sequence_logprob(model, toks) == pytest.approx(brute_logprob(model, toks), abs=1e-5)
    assert sequence_logprob(model, toks) <= 0


def test_sequence_logprob_is_sum_of_positions(model):
    toks = np.array([2, 5, 8, 1, 10, 3])
    per = position_logprobs(model, toks)
    assert per.shape == (5,)
    assert sequence_logprob(model, toks) == pytest.approx(per.sum(), abs=1e-12)


def test_sequence_logprob_too_short(model):
    with pytest.raises(LengthError):
        sequence_logprob(model, np.array([1]))


def test_generate_zero_new(model):
    out = generate(model, np.array([1, 2, 3]), 0, 1.0, seed=0)
    assert out.tolist() == [1, 2, 3]


def test_generate_deterministic(model):
    a = generate(model, np.array([1]), 8, 1.0, seed=42)
    b = generate(model, np.array([1]), 8, 1.0, seed=42)
    assert np.array_equal(a, b)
    assert len(a) == 9


def one_hot_head_model(token):
    # zero block outputs leave the final state equal to the embedding; every
    # embedding points along axis 0, so the head column picks the winner
    m = TransformerLM.init(SMALL, seed=1)
    for layer in range(SMALL.n_layers):
        m.params[f"layers.{layer}.wo"].data[:] = 0.0
        m.params[f"layers.{layer}.w2"].data[:] = 0.0
    m.params["tok_emb"].data[:] = 0.0
    m.params["tok_emb"].data[:, 0] = 1.0
    m.params["lm_head"].data[:] = 0.0
    m.params["lm_head"].data[0, token] = 1.0
    return m


def test_generate_argmax_forced_head():
    out = generate(one_hot_head_model(6), np.array([1, 2]), 4, 0.0, seed=0)
    assert out.tolist() == [1, 2, 6, 6, 6, 6]


def test_generate_argmax_lowest_index_tie():
    m = one_hot_head_model(6)
    m.params["lm_head"].data[:] = 0.0
    assert generate(m, np.array([5]), 2, 0.0, seed=0).tolist() == [5, 0, 0]


def test_generate_errors(model):
    with pytest.raises(LengthError):
        generate(model, np.arange(10) % 11, 3, 1.0, seed=0)
    with pytest.raises(DomainError):
        generate(model, np.array([1]), 1, -1.0, seed=0)


def test_widths_compatible():
    other = ModelConfig(vocab_size=11, d_model=16, n_heads=2, n_layers=5, d_ff=8, max_seq_len=12)
    assert widths_compatible(SMALL, other)
    assert not widths_compatible(SMALL, ModelConfig(11, 16, 4, 2, 24, 12))


@pytest.mark.slow
def test_finite_difference_every_group():
    cfg = ModelConfig(vocab_size=13, d_model=32, n_heads=4, n_layers=2, d_ff=48, max_seq_len=8)
    m = TransformerLM.init(cfg, seed=7, dtype=np.float64)
    rng = np.random.default_rng(1)
    for t in m.params.values():
        if t.shape == (32,):
            t.data[:] = 1.0 + 0.1 * rng.standard_normal(32)
    toks = rng.integers(0, 13, size=(2, 7))

    def loss():
        return cross_entropy(forward(m, toks[:, :-1]).logits, toks[:, 1:])

    groups = {}
    for name, t in m.params.items():
        groups.setdefault(name.split(".")[-1], {})[name] = t
    total = 0
    for g, params in groups.items():
        recs = check_gradients(loss, params, n_samples=6, step=1e-5, seed=len(g))
        total += len(recs)
        worst = max(recs, key=lambda r: r[4])
        assert worst[4] <= 1e-4, (g, worst)
    assert total >= 64
