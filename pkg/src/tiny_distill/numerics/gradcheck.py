"""Central finite-difference checks for analytic gradients."""

from __future__ import annotations

import numpy as np

from .tensor import no_grad


def numeric_grad(loss_fn, tensor, index, step=1e-4):
    """d loss / d tensor[index] by central differences; ``loss_fn()``
    rebuilds the loss from current tensor values."""
    flat = tensor.data.reshape(-1)
    orig = flat[index].copy()
    with no_grad():
        flat[index] = orig + step
        up = float(loss_fn().data)
        flat[index] = orig - step
        down = float(loss_fn().data)
    flat[index] = orig
    return (up - down) / (2 * step)


def relative_error(analytic, numeric, floor=1e-8):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(loss_fn, params, n_samples=64, step=1e-4, seed=0):
    """Compare analytic and numeric gradients at randomly sampled entries.

    ``params`` maps names to leaf tensors. Returns a list of
    ``(name, flat_index, analytic, numeric, rel_err)`` records.
    """
    for t in params.values():
        t.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    names = list(params)
    sizes = np.array([params[n].size for n in names])
    # sample (tensor, entry) pairs proportionally to tensor size
    picks = rng.choice(sizes.sum(), size=min(n_samples, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    records = []
    for flat in np.sort(picks):
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[k]
        idx = int(flat - offsets[k])
        t = params[name]
        ana = float(t.grad.reshape(-1)[idx]) if t.grad is not None else 0.0
        num = numeric_grad(loss_fn, t, idx, step)
        records.append((name, idx, ana, num, relative_error(ana, num)))
    return records
