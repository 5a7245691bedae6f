"""Low-rank adapters on the query/value projections, and their fold-in."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, UsageError
from ..numerics import Tensor
from ..transformer import TransformerLM, token_logprob_table
from .config import LORA_TARGETS, LoraConfig

LORA_INIT_STD = 0.02


class LoraModel:
    """A frozen base model plus trainable A/B factors.

    Quacks like a TransformerLM for ``forward``: ``config``, ``params``,
    ``adapters`` and ``dtype`` are all present. Base tensors are read-only
    views that never receive gradients.
    """

    def __init__(self, base: TransformerLM, cfg: LoraConfig, factors: dict[str, tuple[Tensor, Tensor]]):
        self.base = base
        self.lora_config = cfg
        self.config = base.config
        self.params = {k: Tensor._wrap(t.data) for k, t in base.params.items()}
        self.factors = factors
        self.adapters = {name: (a, b, cfg.scale) for name, (a, b) in factors.items()}
        self.merged = False

    @property
    def dtype(self):
        return self.base.dtype

    def trainable(self) -> dict[str, Tensor]:
        out = {}
        for name, (a, b) in self.factors.items():
            out[f"{name}.lora_A"] = a
            out[f"{name}.lora_B"] = b
        return out

    def param_count(self) -> int:
        return self.base.param_count()

    def next_token_logprobs(self, tokens):
        return token_logprob_table(self, tokens)


def lora_attach(model: TransformerLM, cfg: LoraConfig, seed: int) -> LoraModel:
    d = model.config.d_model
    if cfg.rank >= d:
        raise ConfigError(f"LoRA rank {cfg.rank} must be below d_model {d}")
    rng = np.random.default_rng(seed)
    factors = {}
    for layer in range(model.config.n_layers):
        for tgt in cfg.targets:
            name = f"layers.{layer}.{LORA_TARGETS[tgt]}"
            d_in, d_out = model.params[name].shape
            a = Tensor(rng.normal(0.0, LORA_INIT_STD, size=(d_in, cfg.rank)), requires_grad=True, dtype=model.dtype, name=name + ".lora_A")
            b = Tensor(np.zeros((cfg.rank, d_out)), requires_grad=True, dtype=model.dtype, name=name + ".lora_B")
            factors[name] = (a, b)
    return LoraModel(model, cfg, factors)


def lora_merge(handle: LoraModel) -> TransformerLM:
    """Fold scale * A @ B into each targeted weight and return a plain model."""
    if not isinstance(handle, LoraModel):
        raise UsageError("lora_merge expects a handle returned by lora_attach")
    if handle.merged:
        raise UsageError("adapter was already merged")
    scale = handle.lora_config.scale
    params = {}
    for name, t in handle.base.params.items():
        arr = t.data.copy()
        if name in handle.factors:
            a, b = handle.factors[name]
            delta = scale * (a.data.astype(np.float64) @ b.data.astype(np.float64))
            arr = (arr.astype(np.float64) + delta).astype(t.dtype) if np.any(delta) else arr
        params[name] = Tensor(arr, requires_grad=True, name=name)
    handle.merged = True
    return TransformerLM(handle.config, params)
