import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tiny_distill.distill import (
    Adam,
    DistillConfig,
    LayerMap,
    LoraConfig,
    TrainConfig,
    align_loss,
    distill_train,
    layer_map_apply,
    lm_loss,
    lora_attach,
    lora_merge,
    output_loss,
    prune_init,
    sample_batch,
    teacher_correct,
    total_loss,
    train_lm,
)
from tiny_distill.errors import ConfigError, DomainError, NonFiniteError, ShapeError, UsageError
from tiny_distill.numerics import Tensor, backward, cross_entropy
from tiny_distill.transformer import BLOCK_KEYS, ForwardTrace, ModelConfig, TransformerLM, forward

TEACHER = ModelConfig(vocab_size=12, d_model=16, n_heads=2, n_layers=8, d_ff=24, max_seq_len=16)


def softmax_rows(x):
    z = np.exp(x - x.max(-1, keepdims=True))
    return z / z.sum(-1, keepdims=True)


def brute_kl_rows(p, q):
    p = p.reshape(-1, p.shape[-1])
    q = q.reshape(-1, q.shape[-1])
    tot = 0.0
    for rp, rq in zip(p, q):
        tot += sum(a * (math.log(a) - math.log(max(b, 1e-9))) for a, b in zip(rp, rq) if a > 0)
    return tot / len(p)


def brute_cos(a, b):
    a = a.reshape(-1, a.shape[-1])
    b = b.reshape(-1, b.shape[-1])
    return float(np.mean([1 - (x @ y) / (np.linalg.norm(x) * np.linalg.norm(y)) for x, y in zip(a, b)]))


@pytest.fixture(scope="module")
def teacher():
    return TransformerLM.init(TEACHER, seed=11)


def toy_corpus(n=40, length=17, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 12, size=length) for _ in range(n)]


# ---------------------------------------------------------------- layer map


def test_layer_map_examples():
    m = LayerMap()
    assert layer_map_apply(m, 0) == 4
    assert layer_map_apply(m, 9, 32) == 31
    with pytest.raises(ConfigError):
        layer_map_apply(m, 10, 32)
    assert m.validate(10, 32)[-1] == 31
    with pytest.raises(ConfigError):
        m.validate(11, 32)


def test_layer_map_rejects_bad_fields():
    with pytest.raises(ConfigError):
        LayerMap(stride=0)
    with pytest.raises(ConfigError):
        LayerMap(offset=-1)


def test_distill_config_validation():
    with pytest.raises(ConfigError):
        DistillConfig(lambda1=0, lambda2=0, lambda3=0)
    with pytest.raises(ConfigError):
        DistillConfig(tau=0)
    with pytest.raises(ConfigError):
        DistillConfig(alpha=(1.0, 1.0)).resolved(3)
    cfg = DistillConfig().resolved(4)
    assert cfg.alpha == (1.0,) * 4 and cfg.gamma == (1.0,) * 4
    assert DistillConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        DistillConfig.from_dict({"tau": 1.0, "beta": 2})


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(steps=1, batch_size=0, seq_len=4, learning_rate=1e-3)
    with pytest.raises(ConfigError):
        TrainConfig(steps=1, batch_size=1, seq_len=4, learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(steps=1, batch_size=1, seq_len=4, learning_rate=1e-3, grad_clip=-1)


# ---------------------------------------------------------------- prune_init


def test_prune_init_copies_mapped_blocks():
    cfg = ModelConfig(vocab_size=12, d_model=16, n_heads=2, n_layers=16, d_ff=24, max_seq_len=16)
    t = TransformerLM.init(cfg, seed=2)
    s = prune_init(t, LayerMap(3, 4), 4)
    assert s.config.n_layers == 4
    for layer, g in enumerate([4, 7, 10, 13]):
        for k in BLOCK_KEYS:
            a = s.params[f"layers.{layer}.{k}"].data
            b = t.params[f"layers.{g}.{k}"].data
            assert a.tobytes() == b.tobytes()
            assert a is not b
    for k in ("tok_emb", "norm_f", "lm_head"):
        assert s.params[k].data.tobytes() == t.params[k].data.tobytes()
    assert s.config.rope_base == t.config.rope_base
    toks = np.arange(10) % 12
    assert not np.array_equal(forward(s, toks).logits.data, forward(t, toks).logits.data)


def test_prune_init_map_bounds(teacher):
    # an 8-layer teacher holds layers 4 and 7 under 3l+4, but not 10
    assert prune_init(teacher, LayerMap(3, 4), 2).config.n_layers == 2
    with pytest.raises(ConfigError):
        prune_init(teacher, LayerMap(3, 4), 3)
    assert prune_init(teacher, LayerMap(3, 1), 3).config.n_layers == 3


# ---------------------------------------------------------------- losses


def hand_trace(rng, layers, b=2, h=2, t=5, d=6, v=7):
    hid = [Tensor(rng.standard_normal((b, t, d)), dtype=np.float64) for _ in range(layers)]
    att = []
    for _ in range(layers):
        raw = rng.standard_normal((b, h, t, t))
        raw = np.where(np.tril(np.ones((t, t), bool)), raw, -np.inf)
        att.append(Tensor(softmax_rows(raw), dtype=np.float64))
    return ForwardTrace(Tensor(rng.standard_normal((b, t, v)), dtype=np.float64), hid, att)


def test_align_self_alignment_zero():
    rng = np.random.default_rng(0)
    tt = hand_trace(rng, layers=6)
    m = LayerMap(2, 1)
    st_ = ForwardTrace(tt.logits, [tt.hidden_states[m(l)] for l in range(2)], [tt.attention_maps[m(l)] for l in range(2)])
    val = float(align_loss(tt, st_, DistillConfig(layer_map=m)).data)
    assert abs(val) <= 1e-6


def test_align_brute_force_two_layers():
    rng = np.random.default_rng(1)
    tt = hand_trace(rng, layers=4)
    st_ = hand_trace(rng, layers=2)
    cfg = DistillConfig(alpha=(0.5, 2.0), gamma=(1.5, 0.25), layer_map=LayerMap(2, 1))
    expect = 0.0
    for l, (a, g) in enumerate(zip(cfg.alpha, cfg.gamma)):
        gl = 2 * l + 1
        expect += a * brute_cos(tt.hidden_states[gl].data, st_.hidden_states[l].data)
        expect += g * brute_kl_rows(tt.attention_maps[gl].data, st_.attention_maps[l].data)
    assert float(align_loss(tt, st_, cfg).data) == pytest.approx(expect, abs=1e-6)


def test_align_gamma_zero_is_cosine_sum():
    rng = np.random.default_rng(2)
    tt = hand_trace(rng, layers=4)
    st_ = hand_trace(rng, layers=2)
    cfg = DistillConfig(gamma=(0.0, 0.0), layer_map=LayerMap(2, 1))
    expect = sum(brute_cos(tt.hidden_states[2 * l + 1].data, st_.hidden_states[l].data) for l in range(2))
    assert float(align_loss(tt, st_, cfg).data) == pytest.approx(expect, abs=1e-9)


def test_align_errors():
    rng = np.random.default_rng(3)
    tt = hand_trace(rng, layers=4)
    st_ = hand_trace(rng, layers=2)
    bare = ForwardTrace(st_.logits, st_.hidden_states, [])
    with pytest.raises(UsageError):
        align_loss(tt, bare, DistillConfig(layer_map=LayerMap(2, 1)))
    wide = hand_trace(rng, layers=2, h=3)
    with pytest.raises(ShapeError):
        align_loss(tt, wide, DistillConfig(layer_map=LayerMap(2, 1)))


def test_align_nonnegative_on_models(teacher):
    s = prune_init(teacher, LayerMap(3, 1), 3)
    for t in s.params.values():
        t.data += 0.05 * np.random.default_rng(0).standard_normal(t.shape).astype(np.float32)
    toks = np.random.default_rng(1).integers(0, 12, size=(2, 9))
    tt = forward(teacher, toks, hidden=True, attention=True)
    st_ = forward(s, toks, hidden=True, attention=True)
    assert float(align_loss(tt, st_, DistillConfig(layer_map=LayerMap(3, 1))).data) >= -1e-6


def test_output_loss_identical_zero():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 6)))
    for tau in (0.5, 2.0, 10.0):
        assert abs(float(output_loss(x, x, tau).data)) <= 1e-7


def test_output_loss_high_temperature_limit():
    rng = np.random.default_rng(1)
    a, b = Tensor(rng.standard_normal((4, 9))), Tensor(rng.standard_normal((4, 9)))
    assert float(output_loss(a, b, 1e6).data) <= 1e-6


def test_output_loss_brute_force():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((2, 5)), rng.standard_normal((2, 5))
    expect = brute_kl_rows(softmax_rows(a / 2), softmax_rows(b / 2))
    got = float(output_loss(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), 2.0).data)
    assert got == pytest.approx(expect, abs=1e-6)
    scaled = float(output_loss(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), 2.0, True).data)
    assert scaled == pytest.approx(4 * expect, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-5, 5), st.floats(0.3, 5))
def test_output_loss_shift_invariant(seed, shift, tau):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 7))
    b = a + shift + np.zeros((3, 1))
    val = float(output_loss(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), tau).data)
    assert abs(val) <= 1e-7
    c = rng.standard_normal((3, 7))
    assert float(output_loss(Tensor(a, dtype=np.float64), Tensor(c, dtype=np.float64), tau).data) >= -1e-7


def test_output_loss_errors():
    a = Tensor(np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        output_loss(a, Tensor(np.zeros((2, 4))), 1.0)
    with pytest.raises(DomainError):
        output_loss(a, a, 0.0)
    with pytest.raises(DomainError):
        output_loss(a, a, -1.0)


def test_lm_loss_uniform_and_delegation():
    assert float(lm_loss(Tensor(np.zeros((4, 100))), np.arange(4)).data) == pytest.approx(math.log(100), abs=1e-6)
    rng = np.random.default_rng(0)
    logits = Tensor(rng.standard_normal((3, 6, 9)))
    targets = rng.integers(0, 9, size=(3, 6))
    assert lm_loss(logits, targets).data.tobytes() == cross_entropy(logits, targets).data.tobytes()


def test_lm_loss_brute_force():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((5, 8))
    y = rng.integers(0, 8, size=5)
    expect = np.mean([-(x[i, y[i]] - math.log(sum(math.exp(v) for v in x[i]))) for i in range(5)])
    assert float(lm_loss(Tensor(x, dtype=np.float64), y).data) == pytest.approx(expect, abs=1e-6)


def test_total_loss_arithmetic():
    assert total_loss(0.5, 0.25, 4.0, DistillConfig()) == 4.75
    lm = Tensor(np.array(3.25))
    out = total_loss(Tensor(np.array(1.0)), Tensor(np.array(2.0)), lm, DistillConfig(lambda1=0, lambda2=0, lambda3=1))
    assert out.data.tobytes() == lm.data.tobytes()
    with pytest.raises(DomainError):
        total_loss(float("nan"), 0.0, 1.0, DistillConfig())


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 3), st.floats(0, 3), st.floats(0, 3), st.floats(0, 3))
def test_total_loss_linear(l1, l2, l3, c):
    terms = (0.7, 1.3, 2.9)
    base = total_loss(*terms, DistillConfig(lambda1=l1, lambda2=l2, lambda3=l3 + 1e-3))
    expect = l1 * 0.7 + l2 * 1.3 + (l3 + 1e-3) * 2.9
    assert base == pytest.approx(expect, rel=1e-12, abs=1e-12)


def test_total_loss_gradient_is_weighted_sum():
    cfg_m = ModelConfig(vocab_size=9, d_model=8, n_heads=2, n_layers=4, d_ff=12, max_seq_len=8)
    teacher = TransformerLM.init(cfg_m, seed=0, dtype=np.float64)
    student = TransformerLM.init(ModelConfig(9, 8, 2, 2, 12, 8), seed=1, dtype=np.float64)
    toks = np.random.default_rng(0).integers(0, 9, size=(2, 7))
    dcfg = DistillConfig(lambda1=0.3, lambda2=1.7, lambda3=0.9, layer_map=LayerMap(2, 1))

    def grads(which):
        for p in student.params.values():
            p.grad = None
        tt = forward(teacher, toks[:, :-1], hidden=True, attention=True)
        st_ = forward(student, toks[:, :-1], hidden=True, attention=True)
        terms = {
            "align": align_loss(tt, st_, dcfg),
            "output": output_loss(tt.logits, st_.logits, dcfg.tau),
            "lm": lm_loss(st_.logits, toks[:, 1:]),
        }
        loss = total_loss(terms["align"], terms["output"], terms["lm"], dcfg) if which == "total" else terms[which]
        backward(loss)
        return {k: np.zeros_like(p.data) if p.grad is None else p.grad.copy() for k, p in student.params.items()}

    total = grads("total")
    parts = {k: grads(k) for k in ("align", "output", "lm")}
    for name in total:
        combo = 0.3 * parts["align"][name] + 1.7 * parts["output"][name] + 0.9 * parts["lm"][name]
        np.testing.assert_allclose(total[name], combo, atol=1e-6)


# ---------------------------------------------------------------- LoRA


def test_lora_fresh_adapter_is_identity(teacher):
    h = lora_attach(teacher, LoraConfig(rank=2), seed=0)
    toks = np.arange(10) % 12
    assert forward(h, toks).logits.data.tobytes() == forward(teacher, toks).logits.data.tobytes()


def test_lora_trainable_count(teacher):
    cfg = LoraConfig(rank=3, targets=("Q", "V"))
    h = lora_attach(teacher, cfg, seed=0)
    d = TEACHER.d_model
    expect = TEACHER.n_layers * 2 * 3 * (d + d)
    assert sum(t.size for t in h.trainable().values()) == expect
    h1 = lora_attach(teacher, LoraConfig(rank=3, targets=("V",)), seed=0)
    assert sum(t.size for t in h1.trainable().values()) == expect // 2


def test_lora_gradients_only_reach_adapters(teacher):
    h = lora_attach(teacher, LoraConfig(rank=2), seed=0)
    for t in teacher.params.values():
        t.grad = None
    toks = np.random.default_rng(0).integers(0, 12, size=(2, 9))
    backward(lm_loss(forward(h, toks[:, :-1]).logits, toks[:, 1:]))
    assert all(t.grad is None for t in teacher.params.values())
    assert all(t.grad is None for t in h.params.values())
    grads = h.trainable()
    assert all(g.grad is not None for g in grads.values())
    assert any(np.any(g.grad != 0) for k, g in grads.items() if k.endswith("lora_B"))


def test_lora_config_errors(teacher):
    with pytest.raises(ConfigError):
        LoraConfig(targets=("K",))
    with pytest.raises(ConfigError):
        LoraConfig(targets=())
    with pytest.raises(ConfigError):
        LoraConfig(rank=0)
    with pytest.raises(ConfigError):
        lora_attach(teacher, LoraConfig(rank=16), seed=0)


def test_lora_merge_zero_is_bitwise(teacher):
    h = lora_attach(teacher, LoraConfig(rank=2), seed=0)
    merged = lora_merge(h)
    for k in teacher.params:
        assert merged.params[k].data.tobytes() == teacher.params[k].data.tobytes()
    with pytest.raises(UsageError):
        lora_merge(h)


def test_lora_merge_after_training_matches(teacher):
    h = lora_attach(teacher, LoraConfig(rank=2, scale=2.0), seed=1)
    train_lm(h, toy_corpus(), TrainConfig(steps=15, batch_size=4, seq_len=12, learning_rate=1e-2))
    assert any(np.any(b.data != 0) for k, b in h.trainable().items() if k.endswith("lora_B"))
    toks = np.random.default_rng(3).integers(0, 12, size=(3, 16))
    adapted = forward(h, toks).logits.data
    merged = lora_merge(h)
    np.testing.assert_allclose(forward(merged, toks).logits.data, adapted, atol=1e-5)


# ---------------------------------------------------------------- training


def test_sample_batch_shapes_and_determinism():
    seqs = toy_corpus(10, 30)
    a = sample_batch(seqs, 5, 8, np.random.default_rng([1, 2]))
    b = sample_batch(seqs, 5, 8, np.random.default_rng([1, 2]))
    assert a.shape == (5, 9) and np.array_equal(a, b)
    short = [np.arange(4), np.arange(20)]
    assert sample_batch(short, 6, 8, np.random.default_rng(0)).shape[1] <= 9


def test_train_lm_zero_steps_unchanged(teacher):
    m = teacher.copy()
    rep = train_lm(m, toy_corpus(), TrainConfig(steps=0, batch_size=2, seq_len=8, learning_rate=1e-3))
    assert rep.records == []
    for k in m.params:
        assert m.params[k].data.tobytes() == teacher.params[k].data.tobytes()


def test_train_lm_alternating_corpus():
    cfg = ModelConfig(vocab_size=2, d_model=16, n_heads=2, n_layers=1, d_ff=16, max_seq_len=16)
    m = TransformerLM.init(cfg, seed=0)
    corpus = [np.arange(i, i + 17) % 2 for i in range(2)]
    rep = train_lm(m, corpus, TrainConfig(steps=200, batch_size=8, seq_len=16, learning_rate=1e-2, log_interval=1))
    assert rep.records[-1]["lm"] < 0.1 * rep.records[0]["lm"]


def test_train_lm_deterministic():
    cfg = ModelConfig(vocab_size=12, d_model=16, n_heads=2, n_layers=2, d_ff=16, max_seq_len=16)
    outs = []
    for _ in range(2):
        m = TransformerLM.init(cfg, seed=4)
        train_lm(m, toy_corpus(), TrainConfig(steps=6, batch_size=3, seq_len=10, learning_rate=3e-3, seed=9))
        outs.append(m)
    for k in outs[0].params:
        assert outs[0].params[k].data.tobytes() == outs[1].params[k].data.tobytes()


def test_train_lm_resume_matches_uninterrupted():
    cfg = ModelConfig(vocab_size=12, d_model=16, n_heads=2, n_layers=2, d_ff=16, max_seq_len=16)
    tcfg = TrainConfig(steps=8, batch_size=3, seq_len=10, learning_rate=3e-3, seed=2, log_interval=2)
    full = TransformerLM.init(cfg, seed=4)
    train_lm(full, toy_corpus(), tcfg)

    part = TransformerLM.init(cfg, seed=4)
    saved = {}

    def grab(step, record, opt):
        if step == 5:
            saved["params"] = {k: v.copy() for k, v in part.state_arrays().items()}
            saved["opt"] = (opt.t, {k: v.copy() for k, v in opt.state_arrays().items()})

    train_lm(part, toy_corpus(), TrainConfig(**{**tcfg.to_dict(), "steps": 5}), callback=grab)
    resumed = TransformerLM(cfg, {k: Tensor(v, requires_grad=True) for k, v in saved["params"].items()})
    opt = Adam.from_config(resumed.trainable(), tcfg)
    opt.load_state(*saved["opt"])
    rep = train_lm(resumed, toy_corpus(), tcfg, optimizer=opt, start_step=5)
    assert [r["step"] for r in rep.records] == [6, 8]
    for k in full.params:
        assert full.params[k].data.tobytes() == resumed.params[k].data.tobytes()


def test_train_lm_errors(teacher):
    with pytest.raises(UsageError):
        train_lm(teacher.copy(), [], TrainConfig(steps=1, batch_size=1, seq_len=4, learning_rate=1e-3))
    with pytest.raises(UsageError):
        train_lm(teacher.copy(), [np.array([1])], TrainConfig(steps=1, batch_size=1, seq_len=4, learning_rate=1e-3))
    with pytest.raises(ConfigError):
        train_lm(teacher.copy(), toy_corpus(), TrainConfig(steps=1, batch_size=1, seq_len=40, learning_rate=1e-3))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_lm_nonfinite_aborts(teacher):
    m = teacher.copy()
    m.params["lm_head"].data[:] = 3e38
    with pytest.raises(NonFiniteError, match="step 0"):
        train_lm(m, toy_corpus(), TrainConfig(steps=2, batch_size=2, seq_len=8, learning_rate=1e-3))


def test_log_interval_record_count(teacher):
    m = prune_init(teacher, LayerMap(3, 1), 3)
    rep = train_lm(m, toy_corpus(), TrainConfig(steps=9, batch_size=2, seq_len=8, learning_rate=1e-3, log_interval=3))
    assert [r["step"] for r in rep.records] == [3, 6, 9]
    assert {"stage", "step", "lm", "wall_time"} <= set(rep.records[0])


def test_distill_lm_only_matches_train_lm(teacher):
    tcfg = TrainConfig(steps=6, batch_size=3, seq_len=10, learning_rate=3e-3, seed=5, log_interval=1)
    a = prune_init(teacher, LayerMap(3, 1), 3)
    b = prune_init(teacher, LayerMap(3, 1), 3)
    ra = train_lm(a, toy_corpus(), tcfg)
    rb = distill_train(teacher, b, toy_corpus(), DistillConfig(lambda1=0, lambda2=0, lambda3=1, layer_map=LayerMap(3, 1)), tcfg)
    assert ra.series("lm") == rb.series("lm")
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()


def test_distill_never_mutates_teacher(teacher):
    before = {k: v.copy() for k, v in teacher.state_arrays().items()}
    s = prune_init(teacher, LayerMap(3, 1), 3)
    rep = distill_train(teacher, s, toy_corpus(), DistillConfig(layer_map=LayerMap(3, 1)),
                        TrainConfig(steps=4, batch_size=2, seq_len=10, learning_rate=1e-2, log_interval=2))
    for k, v in teacher.state_arrays().items():
        assert v.tobytes() == before[k].tobytes()
        assert teacher.params[k].grad is None
    assert {"align", "output", "lm", "total"} <= set(rep.records[0])
    r = rep.records[0]
    assert r["total"] == pytest.approx(r["align"] + r["output"] + r["lm"], rel=1e-5)


def test_distill_width_mismatch(teacher):
    other = TransformerLM.init(ModelConfig(12, 8, 2, 2, 24, 16), seed=0)
    with pytest.raises(ConfigError):
        distill_train(teacher, other, toy_corpus(), DistillConfig(layer_map=LayerMap(3, 1)),
                      TrainConfig(steps=1, batch_size=1, seq_len=8, learning_rate=1e-3))


def test_distill_invalid_map(teacher):
    s = prune_init(teacher, LayerMap(3, 1), 3)
    with pytest.raises(ConfigError):
        distill_train(teacher, s, toy_corpus(), DistillConfig(),
                      TrainConfig(steps=1, batch_size=1, seq_len=8, learning_rate=1e-3))


def test_teacher_correct_zero_steps(teacher):
    out = teacher_correct(teacher, toy_corpus(), LoraConfig(rank=2), TrainConfig(steps=0, batch_size=2, seq_len=8, learning_rate=1e-3))
    toks = np.arange(12)
    np.testing.assert_allclose(forward(out, toks).logits.data, forward(teacher, toks).logits.data, atol=1e-5)
