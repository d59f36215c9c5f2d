"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints per-kernel timings for both backends, the speedup, and whether the
two backends agree bit-for-bit, then one full training step per backend.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from gatefuse import model as M
from gatefuse import synth
from gatefuse.fusion import FusionConfig
from gatefuse.numerics import kernels
from gatefuse.trainer import loss_and_grads


def kernel_cases(rng):
    b, h, length, dh = 32, 2, 24, 8
    g = b * h
    x = rng.normal(size=(g * length, length))
    visible = rng.random((g * length, length)) < 0.8
    visible[:, 0] = True
    q = rng.normal(size=(g, length, dh))
    k = rng.normal(size=(g, length, dh))
    v = rng.normal(size=(g, length, dh))
    p = kernels.softmax_fwd(x, visible).reshape(g, length, length)
    gp = rng.normal(size=p.shape)
    feats = rng.normal(size=(b, length, 16))
    onehot = (rng.random((b, 3, length)) < 0.3).astype(float)
    attn = p.reshape(b, h, length, length)
    rows = (rng.random((b, length)) < 0.2).astype(float)
    return {
        "softmax_fwd": lambda: kernels.softmax_fwd(x, visible),
        "softmax_bwd": lambda: kernels.softmax_bwd(p.reshape(-1, length), gp.reshape(-1, length)),
        "scores_fwd": lambda: kernels.scores_fwd(q, k, 0.35),
        "attend_fwd": lambda: kernels.attend_fwd(p, v),
        "segment_sum_fwd": lambda: kernels.segment_sum_fwd(feats, onehot),
        "query_mass_fwd": lambda: kernels.query_mass_fwd(attn, rows),
    }


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(np.array_equal(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def train_step_case():
    spec = synth.TaskSpec()
    ds = synth.generate_dataset(spec, 64, seed=0)
    cfg = M.ModelConfig(fusion=FusionConfig(), vocab_in=spec.vocab_size, vocab_ans=spec.n_classes)
    params = M.init_params(cfg, 0)
    batch = ds.episodes[:32]
    return lambda: loss_and_grads(params, batch, cfg)


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)} (default {kernels.backend()})")
    rng = np.random.default_rng(0)
    cases = kernel_cases(rng)
    print(f"{'kernel':<16}" + "".join(f"{b + ' ms':>14}" for b in backends) + f"{'speedup':>10}{'identical':>11}")
    for name, fn in cases.items():
        times, outs = {}, {}
        for b in backends:
            with kernels.backend_scope(b):
                outs[b] = fn()
                times[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        same = _same(outs["python"], outs["cython"]) if "cython" in outs else True
        print(f"{name:<16}" + "".join(f"{times[b]:>14.3f}" for b in backends) + f"{speed:>10.1f}{str(same):>11}")
    step = train_step_case()
    for b in backends:
        with kernels.backend_scope(b):
            t = min(timeit.repeat(step, number=1, repeat=max(3, args.repeat // 4))) * 1e3
        print(f"train step (batch 32), {b}: {t:.1f} ms")


if __name__ == "__main__":
    main()
