"""Compiled vs numpy kernel timings, per kernel and for one full training step.

    python benchmarks/bench_kernels.py [--repeat N] [--step-only]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from tiny_distill.distill import Adam
from tiny_distill.numerics import backward, cross_entropy, kernels
from tiny_distill.transformer import ModelConfig, TransformerLM, forward


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(rng):
    b, h, t, d, v = 32, 4, 64, 128, 154
    scores = rng.standard_normal((b, h, t, t)).astype(np.float32)
    x2 = rng.standard_normal((b * t, d)).astype(np.float32)
    w = np.ones(d, np.float32)
    q = rng.standard_normal((b, h, t, d // h)).astype(np.float32)
    cos = np.cos(rng.random((t, d // h // 2))).astype(np.float32)
    sin = np.sin(rng.random((t, d // h // 2))).astype(np.float32)
    a = rng.standard_normal((b, t, 256)).astype(np.float32)
    logits = rng.standard_normal((b * t, v)).astype(np.float32)
    tgt = rng.integers(0, v, size=b * t)
    cdf = np.cumsum(rng.dirichlet(np.full(100, 0.1), size=100), axis=1)
    u = rng.random(100_000)
    return {
        "causal_softmax": lambda k: k.causal_softmax(scores, 0.125),
        "rmsnorm": lambda k: k.rmsnorm(x2, w, 1e-6),
        "rope": lambda k: k.rope(q, cos, sin),
        "silu_mul": lambda k: k.silu_mul(a, a),
        "cross_entropy_rows": lambda k: k.cross_entropy_rows(logits, tgt),
        "sample_chain(1e5)": lambda k: k.sample_chain(cdf, 0, u),
    }


def train_step_time(repeat):
    cfg = ModelConfig(154, 128, 4, 16, 256, 64)
    model = TransformerLM.init(cfg, seed=0)
    opt = Adam(model.trainable())
    batch = np.random.default_rng(0).integers(0, 100, size=(32, 65))

    def step():
        opt.zero_grad()
        loss = cross_entropy(forward(model, batch[:, :-1]).logits, batch[:, 1:])
        backward(loss)
        opt.step(1e-3)

    step()  # warm up
    return best_of(step, repeat)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--step-only", action="store_true")
    args = ap.parse_args(argv)
    backends = [kernels.numpy_backend] + ([kernels.compiled_backend] if kernels.compiled_backend else [])
    if len(backends) == 1:
        print("compiled extension not importable; timing the numpy backend only")
    names = [b.name for b in backends]
    print(f"{'case':<22}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(backends) > 1 else ""))
    rows = []
    if not args.step_only:
        rng = np.random.default_rng(0)
        for name, fn in kernel_cases(rng).items():
            rows.append((name, [best_of(lambda: fn(b), args.repeat) for b in backends]))
    saved = kernels.active
    step_times = []
    try:
        for b in backends:
            kernels.active = b
            step_times.append(train_step_time(max(1, args.repeat // 2)))
    finally:
        kernels.active = saved
    rows.append(("train step 16L d128", step_times))
    for name, ts in rows:
        line = f"{name:<22}" + "".join(f"{t * 1e3:>10.2f}ms" for t in ts)
        if len(ts) > 1:
            line += f"{ts[0] / ts[1]:>11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
