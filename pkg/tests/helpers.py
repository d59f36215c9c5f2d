"""Shared builders and oracles for the test suite."""

from __future__ import annotations

import mpmath
import numpy as np

from gatefuse import model as M
from gatefuse import synth
from gatefuse.fusion import FusionConfig, init_fusion_params
from gatefuse.numerics import Tape, Tensor, backward


def random_fusion_case(rng, d=None, n_heads=None, n_modalities=None, max_tokens=8,
                       variant="full", present=None, **config_kw):
    """Random config, params, instruction embeddings and features for one sample."""
    if d is None:
        d = int(rng.choice([8, 16]))
    if n_heads is None:
        n_heads = int(rng.choice([h for h in (1, 2, 4) if (d // h) % 2 == 0]))
    if n_modalities is None:
        n_modalities = int(rng.integers(1, 5))
    widths = [int(rng.integers(2, 7)) for _ in range(n_modalities)]
    modalities = tuple((m + 1, w) for m, w in enumerate(widths))
    cfg = FusionConfig.for_variant(variant, d=d, n_heads=n_heads, modalities=modalities, **config_kw)
    params = init_fusion_params(cfg, np.random.default_rng(int(rng.integers(1 << 30))))
    inst = rng.normal(size=(int(rng.integers(1, 5)), d))
    ids = [m for m, _ in modalities] if present is None else present
    feats = [(m, rng.normal(size=(int(rng.integers(1, max_tokens + 1)), dict(modalities)[m]))) for m in ids]
    return cfg, params, inst, feats


def small_task(n=64, seed=0, **kw) -> synth.Dataset:
    base = dict(tokens_per_modality=(2, 4), modality_dims=(6, 6), instruction_length=(2, 3))
    base.update(kw)
    return synth.generate_dataset(synth.TaskSpec(**base), n, seed=seed)


def model_config(spec: synth.TaskSpec, variant="full", head="classification", **fusion_kw) -> M.ModelConfig:
    fusion_kw.setdefault("d", 8)
    fusion_kw.setdefault("n_heads", 2)
    fusion = FusionConfig.for_variant(variant, modalities=tuple(zip(spec.ids, spec.modality_dims)), **fusion_kw)
    return M.ModelConfig(fusion=fusion, vocab_in=spec.vocab_size, vocab_ans=spec.n_classes, head=head)


def relative_error(ga, gfd) -> np.ndarray:
    ga, gfd = np.asarray(ga), np.asarray(gfd)
    return np.abs(ga - gfd) / np.maximum(1.0, np.maximum(np.abs(ga), np.abs(gfd)))


def central_difference(f, params: dict, name: str, h: float = 1e-5) -> np.ndarray:
    """d f / d params[name] by central differences, entry by entry."""
    base = params[name]
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        plus, minus = base.copy(), base.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (f({**params, name: plus}) - f({**params, name: minus})) / (2 * h)
    return grad


def grad_check(f_tensor, params: dict, names=None, h: float = 1e-5) -> dict[str, float]:
    """Max relative error per parameter between tape gradients and central differences.

    ``f_tensor(params)`` builds a scalar Tensor from a dict of arrays or
    tracked tensors.
    """
    tape = Tape()
    loss = f_tensor(tape.watch_all(params))
    grads = backward(loss, tape)

    def f(p):
        out = f_tensor(p)
        return float(out.data if isinstance(out, Tensor) else out)

    errs = {}
    for name in names or sorted(params):
        errs[name] = float(relative_error(grads[name], central_difference(f, params, name, h)).max())
    return errs


def reference_fusion(inst, feats, params, cfg, prefix="fusion."):
    """One-sample fusion assembled from the per-sample operations only.

    Supports the attention-derived gate kinds (default, no-residual,
    flamingo-tanh) at every component level and a single layer.
    Returns (fused rows, beta dict, w dict).
    """
    from gatefuse import gating
    from gatefuse.numerics import ops
    from gatefuse.attention import AttentionParams, self_attention
    from gatefuse.sequence import assemble_sequence, build_mask

    p = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
    toks = [(m, project_np(f, p[f"proj.m{m}.weight"], p[f"proj.m{m}.bias"])) for m, f in feats]
    if cfg.component_level == "concat-only":
        return np.concatenate([inst] + [t for _, t in toks]), {}, {}
    ctrls = None
    if cfg.component_level == "full":
        ctrls = [summarize_np(p["control.base"], t, p["control.wq"], p["control.wk"], p["control.wv"]) for _, t in toks]
    seq = assemble_sequence(inst, toks, ctrls)
    ap = AttentionParams(*(ops.as_tensor(p[f"l0.attn.{n}"]) for n in ("wq", "wk", "wv", "wo")), n_heads=cfg.n_heads)
    att = self_attention(seq.embeddings, build_mask(seq), ap)
    o = att.output.data.copy()
    gated = o.copy()
    betas, ws = {}, {}
    if cfg.component_level == "full":
        beta, _ = gating.modality_coefficients(att.attn, seq.instruction_span, seq.control_positions)
        betas = {m: float(b.data) for m, b in beta.items()}
    for j, (m, _) in enumerate(toks):
        span = seq.content_spans[m]
        if cfg.component_level == "attention-only":
            continue
        w, _ = gating.inner_modality_weights(att.attn, seq.instruction_span, span)
        ws[m] = w.data
        b = betas.get(m, 1.0)
        kind = cfg.gate_variant if cfg.component_level == "full" else gating.ATTENTION
        tg = p["l0.tanh_gate"][j] if kind == gating.FLAMINGO_TANH else None
        gated[span.start:span.stop] = gating.apply_gating(o[span.start:span.stop], w.data, b, kind, tg).data
    h = seq.embeddings.data
    x1 = layer_norm_np(h + gated, p["l0.ln1.gamma"], p["l0.ln1.beta"], cfg.ln_eps)
    x2 = x1 + gelu_np(x1 @ p["l0.ffn.w1"] + p["l0.ffn.b1"]) @ p["l0.ffn.w2"] + p["l0.ffn.b2"]
    if cfg.final_norm:
        x2 = layer_norm_np(x2, p["l0.ln2.gamma"], p["l0.ln2.beta"], cfg.ln_eps)
    x2[list(seq.instruction_span)] = h[list(seq.instruction_span)]
    return x2, betas, ws


def project_np(f, w, b):
    return np.asarray(f) @ w + b


def summarize_np(base, x, wq, wk, wv):
    q = base @ wq
    s = q @ (x @ wk).T / np.sqrt(x.shape[1])
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)) @ (x @ wv)


def layer_norm_np(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def gelu_np(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))


def attn_with_mass(length, instruction, targets: dict[int, float], n_heads=1):
    """Attention tensor whose instruction rows send the given total mass to each key."""
    attn = np.zeros((n_heads, length, length))
    share = 1.0 / len(instruction)
    for i in instruction:
        for j, mass in targets.items():
            attn[:, i, j] = mass * share
    return attn


@mpmath.workdps(50)
def brute_force_attention(h, wq, wk, wv, wo, visible, base=10000.0):
    """Single-head attention with rotary positions, evaluated in 50-digit arithmetic."""
    h, wq, wk, wv, wo = (mpmath.matrix(np.asarray(a).tolist()) for a in (h, wq, wk, wv, wo))
    length, d = h.rows, h.cols

    def rope(row, pos):
        out = [mpmath.mpf(0)] * d
        for i in range(d // 2):
            theta = pos * mpmath.power(base, -mpmath.mpf(2 * i) / d)
            c, s = mpmath.cos(theta), mpmath.sin(theta)
            out[2 * i] = row[2 * i] * c - row[2 * i + 1] * s
            out[2 * i + 1] = row[2 * i] * s + row[2 * i + 1] * c
        return out

    q, k, v = h * wq, h * wk, h * wv
    qr = [rope([q[i, j] for j in range(d)], i) for i in range(length)]
    kr = [rope([k[i, j] for j in range(d)], i) for i in range(length)]
    attn = mpmath.zeros(length, length)
    for i in range(length):
        s = [sum(qr[i][t] * kr[j][t] for t in range(d)) / mpmath.sqrt(d) for j in range(length)]
        m = max(s[j] for j in range(length) if visible[j])
        e = [mpmath.exp(s[j] - m) if visible[j] else mpmath.mpf(0) for j in range(length)]
        z = sum(e)
        for j in range(length):
            attn[i, j] = e[j] / z
    out = attn * v * wo
    to_np = lambda m: np.array([[float(m[i, j]) for j in range(m.cols)] for i in range(m.rows)])  # noqa: E731
    return to_np(out), to_np(attn)
