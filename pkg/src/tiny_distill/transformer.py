"""Decoder-only causal transformer with rotary attention.

Pre-norm residual blocks (RMSNorm, multi-head attention, SwiGLU MLP), a
final RMSNorm and an untied LM head. ``forward`` can capture each block's
output and each layer's attention probabilities for layer alignment.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DomainError, LengthError
from .numerics import (
    Tensor,
    causal_softmax,
    embedding,
    matmul,
    no_grad,
    reshape,
    rmsnorm,
    rope,
    silu_mul,
    transpose,
)

BLOCK_KEYS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w3", "w2")
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    n_layers: int
    d_ff: int
    max_seq_len: int
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_seq_len"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not a multiple of n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary encoding")
        if not self.rope_base > 0:
            raise ConfigError("rope_base must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, f, v = self.d_model, self.d_ff, self.vocab_size
        shapes = {"tok_emb": (v, d)}
        block = {
            "attn_norm": (d,),
            "wq": (d, d),
            "wk": (d, d),
            "wv": (d, d),
            "wo": (d, d),
            "ffn_norm": (d,),
            "w1": (d, f),
            "w3": (d, f),
            "w2": (f, d),
        }
        for layer in range(self.n_layers):
            for k in BLOCK_KEYS:
                shapes[f"layers.{layer}.{k}"] = block[k]
        shapes["norm_f"] = (d,)
        shapes["lm_head"] = (d, v)
        return shapes

    def param_count(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes().values())


def widths_compatible(a: ModelConfig, b: ModelConfig) -> bool:
    return (a.vocab_size, a.d_model, a.n_heads, a.rope_base) == (b.vocab_size, b.d_model, b.n_heads, b.rope_base)


class TransformerLM:
    """Parameters of a decoder-only LM, stored as named leaf tensors."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        shapes = config.param_shapes()
        if list(params) != list(shapes):
            missing = set(shapes) - set(params)
            extra = set(params) - set(shapes)
            raise ConfigError(f"parameter names do not match config (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, t in params.items():
            if t.shape != shapes[name]:
                raise ConfigError(f"{name}: shape {t.shape} != {shapes[name]}")
        self.config = config
        self.params = params
        self.adapters: dict = {}

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype=np.float32) -> "TransformerLM":
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in config.param_shapes().items():
            if name.endswith("_norm") or name == "norm_f":
                arr = np.ones(shape)
            else:
                arr = rng.normal(0.0, INIT_STD, size=shape)
            params[name] = Tensor(arr, requires_grad=True, dtype=dtype, name=name)
        return cls(config, params)

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.params.items() if t.requires_grad}

    def block(self, layer: int) -> dict[str, Tensor]:
        return {k: self.params[f"layers.{layer}.{k}"] for k in BLOCK_KEYS}

    def copy(self, dtype=None) -> "TransformerLM":
        dtype = dtype or self.dtype
        params = {k: Tensor(t.data.astype(dtype, copy=True), requires_grad=True, name=k) for k, t in self.params.items()}
        return TransformerLM(self.config, params)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def next_token_logprobs(self, tokens: np.ndarray) -> np.ndarray:
        return token_logprob_table(self, tokens)


@dataclass
class ForwardTrace:
    logits: Tensor
    hidden_states: list[Tensor] = field(default_factory=list)
    attention_maps: list[Tensor] = field(default_factory=list)


@lru_cache(maxsize=64)
def rope_tables(seq_len: int, head_dim: int, base: float, dtype_str: str):
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    angles = np.arange(seq_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(angles).astype(dtype_str)
    sin = np.sin(angles).astype(dtype_str)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return cos, sin


def check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    arr = np.asarray(tokens)
    if arr.ndim not in (1, 2):
        raise DomainError(f"tokens must be 1-d or 2-d, got shape {arr.shape}")
    if arr.size and not np.issubdtype(arr.dtype, np.integer):
        raise DomainError("token ids must be integers")
    t = arr.shape[-1]
    if t == 0:
        raise LengthError("empty token sequence")
    if t > config.max_seq_len:
        raise LengthError(f"sequence length {t} exceeds max_seq_len {config.max_seq_len}")
    if arr.min() < 0 or arr.max() >= config.vocab_size:
        raise DomainError(f"token id out of range [0, {config.vocab_size})")
    return arr.astype(np.int64, copy=False)


def _project(model, x: Tensor, name: str) -> Tensor:
    y = matmul(x, model.params[name])
    ad = model.adapters.get(name)
    if ad is not None:
        a, b, s = ad
        y = y + matmul(matmul(x, a), b) * s
    return y


def forward(model, tokens, hidden: bool = False, attention: bool = False) -> ForwardTrace:
    """Run the model on ``tokens`` ([T] or [B, T]).

    Returns logits and, when requested, the post-block hidden states and
    the per-head attention probabilities of every layer. A 1-d input gives
    outputs without the batch axis.
    """
    cfg = model.config
    ids = check_tokens(cfg, tokens)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    b, t = ids.shape
    h, hd = cfg.n_heads, cfg.head_dim
    p = model.params
    cos, sin = rope_tables(t, hd, float(cfg.rope_base), model.dtype.str)
    att_scale = 1.0 / math.sqrt(hd)

    x = embedding(p["tok_emb"], ids)
    trace = ForwardTrace(logits=None)
    for layer in range(cfg.n_layers):
        pre = f"layers.{layer}."
        a_in = rmsnorm(x, p[pre + "attn_norm"])
        q = transpose(reshape(_project(model, a_in, pre + "wq"), (b, t, h, hd)), (0, 2, 1, 3))
        k = transpose(reshape(_project(model, a_in, pre + "wk"), (b, t, h, hd)), (0, 2, 1, 3))
        v = transpose(reshape(_project(model, a_in, pre + "wv"), (b, t, h, hd)), (0, 2, 1, 3))
        q = rope(q, cos, sin)
        k = rope(k, cos, sin)
        probs = causal_softmax(matmul(q, transpose(k, (0, 1, 3, 2))), att_scale)
        ctx = reshape(transpose(matmul(probs, v), (0, 2, 1, 3)), (b, t, cfg.d_model))
        x = x + _project(model, ctx, pre + "wo")
        f_in = rmsnorm(x, p[pre + "ffn_norm"])
        gate = silu_mul(_project(model, f_in, pre + "w1"), _project(model, f_in, pre + "w3"))
        x = x + _project(model, gate, pre + "w2")
        if hidden:
            trace.hidden_states.append(reshape(x, (t, cfg.d_model)) if squeeze else x)
        if attention:
            trace.attention_maps.append(reshape(probs, (h, t, t)) if squeeze else probs)
    logits = matmul(rmsnorm(x, p["norm_f"]), p["lm_head"])
    trace.logits = reshape(logits, (t, cfg.vocab_size)) if squeeze else logits
    return trace


def token_logprob_table(model, tokens) -> np.ndarray:
    """Full next-token log-probabilities [.., T, V] (float64), no graph."""
    with no_grad():
        logits = forward(model, tokens).logits.data.astype(np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def position_logprobs(model, tokens) -> np.ndarray:
    """log P(tokens[t] | tokens[<t]) for t >= 1; shape [..., T-1]."""
    ids = np.asarray(tokens)
    table = model.next_token_logprobs(ids)
    nxt = ids[..., 1:]
    return np.take_along_axis(table[..., :-1, :], nxt[..., None], axis=-1)[..., 0]


def sequence_logprob(model, tokens) -> float:
    """Sum over t >= 1 of log softmax(logits[t-1])[tokens[t]], in nats."""
    ids = np.asarray(tokens)
    if ids.ndim != 1 or ids.shape[0] < 2:
        raise LengthError("sequence_logprob needs a 1-d sequence of at least 2 tokens")
    return float(position_logprobs(model, ids).sum())


def generate(model, prompt, n_new: int, temperature: float, seed: int) -> np.ndarray:
    """Extend ``prompt`` by ``n_new`` sampled tokens. Temperature 0 is greedy
    decoding with the lowest index winning ties."""
    cfg = model.config
    seq = list(check_tokens(cfg, prompt).tolist())
    if np.asarray(prompt).ndim != 1:
        raise DomainError("generate takes a single 1-d prompt")
    if len(seq) + n_new > cfg.max_seq_len:
        raise LengthError(f"prompt + n_new = {len(seq) + n_new} exceeds max_seq_len {cfg.max_seq_len}")
    if temperature < 0:
        raise DomainError("temperature must be non-negative")
    rng = np.random.default_rng(seed)
    for _ in range(n_new):
        with no_grad():
            logits = forward(model, np.asarray(seq)).logits.data[-1].astype(np.float64)
        if temperature == 0:
            nxt = int(np.argmax(logits))
        else:
            z = logits / temperature
            z -= z.max()
            probs = np.exp(z)
            cdf = np.cumsum(probs / probs.sum())
            nxt = min(int(np.searchsorted(cdf, rng.random(), side="right")), cfg.vocab_size - 1)
        seq.append(nxt)
    return np.asarray(seq, dtype=np.int64)
