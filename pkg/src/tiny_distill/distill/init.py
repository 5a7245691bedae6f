"""Student initialization by keeping a strided subset of teacher blocks."""

from __future__ import annotations

from dataclasses import replace

from ..errors import ConfigError
from ..numerics import Tensor
from ..transformer import BLOCK_KEYS, TransformerLM
from .config import LayerMap


def prune_init(teacher: TransformerLM, layer_map: LayerMap, student_layers: int) -> TransformerLM:
    """Copy teacher blocks g(0..student_layers-1), the embedding, the final
    norm and the LM head into a shallower model of the same width."""
    if not isinstance(student_layers, int) or student_layers < 1:
        raise ConfigError("student_layers must be a positive integer")
    targets = layer_map.validate(student_layers, teacher.config.n_layers)
    cfg = replace(teacher.config, n_layers=student_layers)
    src = teacher.params

    def clone(name):
        return Tensor(src[name].data.copy(), requires_grad=True, name=name)

    params = {"tok_emb": clone("tok_emb")}
    for layer, g in enumerate(targets):
        for k in BLOCK_KEYS:
            name = f"layers.{layer}.{k}"
            params[name] = Tensor(src[f"layers.{g}.{k}"].data.copy(), requires_grad=True, name=name)
    params["norm_f"] = clone("norm_f")
    params["lm_head"] = clone("lm_head")
    return TransformerLM(cfg, params)
