"""The three distillation objectives and their weighted combination."""

from __future__ import annotations

import numpy as np

from ..errors import DomainError, ShapeError, UsageError
from ..numerics import Tensor, cosine_distance, cross_entropy, kl_divergence, scale, softmax
from ..transformer import ForwardTrace
from .config import DistillConfig


def _weighted_sum(terms):
    """Sum (weight, term) pairs, skipping zero weights. Returns a Tensor when
    any term is a Tensor, otherwise a float."""
    total = None
    for w, term in terms:
        if w == 0:
            continue
        part = scale(term, w) if isinstance(term, Tensor) else w * float(term)
        total = part if total is None else total + part
    return total


def align_loss(teacher_trace: ForwardTrace, student_trace: ForwardTrace, cfg: DistillConfig) -> Tensor:
    """Sum over student layers of alpha_l * cosine distance between hidden
    states plus gamma_l * attention KL (teacher as reference), each averaged
    over positions or over (head, query row) pairs."""
    n_student = len(student_trace.hidden_states) or len(student_trace.attention_maps)
    cfg = cfg.resolved(n_student)
    need_hidden = any(a != 0 for a in cfg.alpha)
    need_att = any(g != 0 for g in cfg.gamma)
    if need_hidden and (not teacher_trace.hidden_states or not student_trace.hidden_states):
        raise UsageError("align_loss needs hidden states captured on both traces")
    if need_att and (not teacher_trace.attention_maps or not student_trace.attention_maps):
        raise UsageError("align_loss needs attention maps captured on both traces")
    n_teacher = max(len(teacher_trace.hidden_states), len(teacher_trace.attention_maps))
    targets = cfg.layer_map.validate(n_student, n_teacher)
    terms = []
    for layer, g in enumerate(targets):
        if cfg.alpha[layer] != 0:
            th, sh = teacher_trace.hidden_states[g], student_trace.hidden_states[layer]
            if th.shape != sh.shape:
                raise ShapeError(f"hidden state shapes differ at student layer {layer}: {th.shape} vs {sh.shape}")
            terms.append((cfg.alpha[layer], cosine_distance(th, sh)))
        if cfg.gamma[layer] != 0:
            ta, sa = teacher_trace.attention_maps[g], student_trace.attention_maps[layer]
            if ta.shape[-3] != sa.shape[-3]:
                raise ShapeError(f"head count mismatch at student layer {layer}: {ta.shape[-3]} vs {sa.shape[-3]}")
            if ta.shape != sa.shape:
                raise ShapeError(f"attention shapes differ at student layer {layer}: {ta.shape} vs {sa.shape}")
            terms.append((cfg.gamma[layer], kl_divergence(ta, sa, axis=-1)))
    total = _weighted_sum(terms)
    if total is None:
        dtype = student_trace.logits.dtype
        return Tensor._wrap(np.zeros((), dtype=dtype))
    return total


def output_loss(teacher_logits: Tensor, student_logits: Tensor, tau: float, tau_sq_scale: bool = False) -> Tensor:
    """Mean over positions of KL(softmax(teacher / tau) || softmax(student / tau))."""
    if teacher_logits.shape != student_logits.shape:
        raise ShapeError(f"logit shapes differ: {teacher_logits.shape} vs {student_logits.shape}")
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    inv = 1.0 / tau
    p = softmax(scale(teacher_logits, inv), axis=-1)
    q = softmax(scale(student_logits, inv), axis=-1)
    kl = kl_divergence(p, q, axis=-1)
    return scale(kl, tau * tau) if tau_sq_scale else kl


def lm_loss(student_logits: Tensor, targets) -> Tensor:
    """Next-token cross entropy; ``targets`` are the inputs shifted left."""
    return cross_entropy(student_logits, targets)


def total_loss(align, output, lm, cfg: DistillConfig):
    """lambda1 * align + lambda2 * output + lambda3 * lm."""
    for v in (align, output, lm):
        val = v.data if isinstance(v, Tensor) else v
        if not np.isfinite(val).all():
            raise DomainError("loss terms must be finite")
    total = _weighted_sum(zip(cfg.lambdas, (align, output, lm)))
    return total
