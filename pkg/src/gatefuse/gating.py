"""Instruction-driven token and stream gates.

Both gate levels read the attention tensor of the fusion layer: the mass
that instruction queries place on each content token gives the token
weights ``w``, and the mass on each modality's control token gives the
stream coefficients ``beta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, EmptyModalityError, SpanError
from .numerics import Tensor, ops
from .sequence import PackedLayout

EPSILON = 1e-6
STREAM_THRESHOLD = 1e-6

ATTENTION = "attention"
MLP_SCORE = "mlp-score"
CROSS_ATTN_SCORE = "cross-attn-score"
FLAMINGO_TANH = "flamingo-tanh"
NO_RESIDUAL = "no-residual"
GATE_KINDS = (ATTENTION, MLP_SCORE, CROSS_ATTN_SCORE, FLAMINGO_TANH, NO_RESIDUAL)


@dataclass(frozen=True)
class GateVariant:
    kind: str = ATTENTION

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise ConfigurationError(f"unknown gate variant {self.kind!r}; choose from {GATE_KINDS}")


@dataclass
class GateReport:
    """Per-sample gate values, keyed by modality id."""

    lam: dict[int, np.ndarray] = field(default_factory=dict)
    w: dict[int, np.ndarray] = field(default_factory=dict)
    eta: dict[int, float] = field(default_factory=dict)
    beta: dict[int, float] = field(default_factory=dict)
    inner_fallback: dict[int, bool] = field(default_factory=dict)
    stream_fallback: bool = False
    epsilon: float = EPSILON

    @property
    def any_fallback(self) -> bool:
        return self.stream_fallback or any(self.inner_fallback.values())

    def top_modality(self) -> int | None:
        """Modality with the largest beta; ties go to the lowest id."""
        if not self.beta:
            return None
        return min(self.beta, key=lambda m: (-self.beta[m], m))

    def csv_fields(self, modalities, k: int = 5) -> dict[str, object]:
        row: dict[str, object] = {}
        for m in modalities:
            row[f"beta_m{m}"] = _fmt(self.beta[m]) if m in self.beta else ""
        for m in modalities:
            row[f"inner_fallback_m{m}"] = int(self.inner_fallback[m]) if m in self.inner_fallback else ""
        row["stream_fallback"] = int(self.stream_fallback)
        for m in modalities:
            if m in self.w:
                w = self.w[m]
                order = np.argsort(-w, kind="stable")[:k]
                row[f"w_top_m{m}"] = ";".join(f"{int(t)}:{_fmt(w[t])}" for t in order)
            else:
                row[f"w_top_m{m}"] = ""
        return row


def _fmt(x: float) -> str:
    return f"{float(x):.6g}"


# --- single-sample operations ------------------------------------------------

def summarize_control_token(t_c, x_m, wq, wk, wv) -> Tensor:
    """Single-query attention of the control embedding (k, d) over modality tokens (T, d)."""
    x_m = ops.as_tensor(x_m)
    if x_m.ndim != 2 or x_m.shape[0] == 0:
        raise EmptyModalityError("control-token summary needs at least one modality token")
    t_c = ops.as_tensor(t_c)
    if t_c.ndim == 1:
        t_c = t_c.reshape(1, -1)
    out = summarize_controls(
        t_c, x_m.reshape(1, *x_m.shape), np.ones((1, x_m.shape[0]), dtype=bool), wq, wk, wv
    )
    return out.reshape(t_c.shape)


def summarize_controls(base, tokens, visible, wq, wk, wv) -> Tensor:
    """Batched control summaries.

    ``base`` (k, d) is shared; ``tokens`` (S, T, d) are padded modality tokens
    with ``visible`` (S, T).  Returns (S, k, d).
    """
    s, t, d = tokens.shape
    k = base.shape[0]
    q = ops.matmul(base, wq)  # (k, d)
    q = ops.add(ops.as_tensor(np.zeros((s, k, d))), q)
    keys = ops.matmul(tokens, wk)
    values = ops.matmul(tokens, wv)
    scores = ops.attention_scores(q, keys, 1.0 / math.sqrt(d))
    p = ops.masked_softmax(scores, np.asarray(visible, dtype=bool)[:, None, :])
    return ops.attend(p, values)


def _rows(length: int, span) -> np.ndarray:
    r = np.zeros((1, length))
    r[0, list(span)] = 1.0
    return r


def _check_spans(instruction_span, content_span=None):
    if len(instruction_span) == 0:
        raise SpanError("instruction span is empty")
    if content_span is not None:
        if len(content_span) == 0:
            raise SpanError("modality content span is empty")
        if set(instruction_span) & set(content_span):
            raise SpanError("instruction and content spans overlap")


def inner_modality_weights(attn, instruction_span, content_span, epsilon: float = EPSILON):
    """Token weights within one modality from instruction-to-token attention.

    ``attn`` is (H, L, L).  Returns ``(w, fallback)`` with ``w`` over the
    content span; ``fallback`` means the total mass was below ``epsilon``
    and ``w`` is uniform.
    """
    _check_spans(instruction_span, content_span)
    attn = ops.as_tensor(attn)
    length = attn.shape[-1]
    lam = ops.query_mass(attn.reshape(1, *attn.shape), _rows(length, instruction_span))
    lam = ops.index(lam, (0, np.asarray(list(content_span))))
    return normalize_token_weights(lam, epsilon)


def normalize_token_weights(lam, epsilon: float = EPSILON):
    lam = ops.as_tensor(lam)
    total = ops.sum(lam)
    if total.data < epsilon:
        n = lam.shape[0]
        return ops.as_tensor(np.full(n, 1.0 / n)), True
    return ops.div(lam, total), False


def modality_coefficients(attn, instruction_span, control_positions, threshold: float = STREAM_THRESHOLD):
    """Stream coefficients from instruction-to-control-token attention.

    ``control_positions`` maps modality id to a position or a list of
    positions.  Returns ``(beta, fallback)`` with ``beta`` a dict of scalar
    tensors over the given (available) modalities.
    """
    if not control_positions:
        raise ConfigurationError("modality coefficients need at least one available modality")
    _check_spans(instruction_span)
    attn = ops.as_tensor(attn)
    length = attn.shape[-1]
    mass = ops.query_mass(attn.reshape(1, *attn.shape), _rows(length, instruction_span))
    eta = {}
    for m, pos in control_positions.items():
        pos = np.atleast_1d(np.asarray(pos))
        eta[m] = ops.sum(ops.index(mass, (0, pos)))
    return normalize_stream_weights(eta, threshold)


def normalize_stream_weights(eta: dict, threshold: float = STREAM_THRESHOLD):
    if not eta:
        raise ConfigurationError("no available modality to normalize over")
    total = None
    for value in eta.values():
        total = value if total is None else ops.add(total, value)
    if float(total.data) < threshold:
        n = len(eta)
        return {m: ops.as_tensor(1.0 / n) for m in eta}, True
    return {m: ops.div(v, total) for m, v in eta.items()}, False


def apply_gating(o_m, w, beta, variant: GateVariant | str = ATTENTION, tanh_gate=None) -> Tensor:
    """Gate the attended content tokens ``o_m`` (T, d) of one modality.

    ``tanh_gate`` is the modality's learnable scalar for the flamingo-tanh
    variant (which ignores ``w`` and ``beta``).
    """
    kind = variant.kind if isinstance(variant, GateVariant) else GateVariant(variant).kind
    o_m = ops.as_tensor(o_m)
    if kind == FLAMINGO_TANH:
        g = 0.0 if tanh_gate is None else tanh_gate
        return ops.add(o_m, ops.mul(ops.tanh(g), o_m))
    w = ops.as_tensor(w)
    if w.shape[0] != o_m.shape[0]:
        raise SpanError(f"{w.shape[0]} token weights for {o_m.shape[0]} tokens")
    scaled = ops.mul(ops.mul(beta, ops.reshape(w, (-1, 1))), o_m)
    if kind == NO_RESIDUAL:
        return scaled
    return ops.add(o_m, scaled)


# --- learned scoring variants ---------------------------------------------------

def mlp_stream_logits(instruction_mean, controls, w1, b1, w2, b2) -> Tensor:
    """Per-modality logits from [mean instruction embedding; control summary].

    ``instruction_mean`` (B, d), ``controls`` (B, M, d) -> (B, M).
    """
    b, m, d = controls.shape
    inst = ops.add(ops.as_tensor(np.zeros((b, m, d))), ops.reshape(instruction_mean, (b, 1, d)))
    hidden = ops.tanh(ops.linear(ops.concat([inst, controls], axis=2), w1, b1))
    return ops.reshape(ops.linear(hidden, w2, b2), (b, m))


def cross_attn_token_logits(h, instruction: np.ndarray, wq, wk) -> Tensor:
    """Relevance logit of every position against the instruction tokens.

    Each token queries the instruction keys; the scaled dot products are
    averaged over instruction tokens.  ``h`` (B, L, d) -> (B, L).
    """
    b, length, d = h.shape
    q = ops.matmul(h, wq)
    k = ops.matmul(h, wk)
    n_inst = np.maximum(instruction.sum(axis=1), 1.0)
    k_mean = ops.div(ops.segment_sum(k, instruction[:, None, :]), n_inst[:, None, None])  # (B,1,d)
    return ops.reshape(ops.attention_scores(q, k_mean, 1.0 / math.sqrt(d)), (b, length))


def score_variant(variant: GateVariant | str, instruction_embeddings, modality_tokens, params: dict,
                  controls: dict | None = None):
    """Learned gate scores for one sample.

    ``modality_tokens`` is [(id, (T, d) tokens)]; ``params`` holds the
    variant weights (``mlp.*`` or ``xattn.*``).  ``controls`` maps id to the
    control summary (mlp-score only).  Returns ``(w, beta)`` dicts; the
    level the variant does not produce is ``None``.
    """
    kind = variant.kind if isinstance(variant, GateVariant) else GateVariant(variant).kind
    inst = ops.as_tensor(instruction_embeddings)
    ids = [m for m, _ in modality_tokens]
    if kind == MLP_SCORE:
        if controls is None:
            raise ConfigurationError("mlp-score needs control summaries")
        ctrl = ops.concat([ops.reshape(ops.as_tensor(controls[m]), (1, 1, -1)) for m in ids], axis=1)
        logits = mlp_stream_logits(
            ops.reshape(ops.mean(inst, axis=0), (1, -1)), ctrl,
            params["mlp.w1"], params["mlp.b1"], params["mlp.w2"], params["mlp.b2"],
        )
        beta = ops.masked_softmax(logits)
        return None, {m: ops.index(beta, (0, j)) for j, m in enumerate(ids)}
    if kind == CROSS_ATTN_SCORE:
        toks = [ops.as_tensor(t) for _, t in modality_tokens]
        h = ops.concat([inst] + toks, axis=0)
        t0 = inst.shape[0]
        rows = np.zeros((1, h.shape[0]))
        rows[0, :t0] = 1.0
        logits = cross_attn_token_logits(ops.reshape(h, (1, *h.shape)), rows, params["xattn.wq"], params["xattn.wk"])
        w, start = {}, t0
        for m, t in zip(ids, toks):
            w[m] = ops.masked_softmax(ops.index(logits, (0, slice(start, start + t.shape[0]))))
            start += t.shape[0]
        return w, None
    raise ConfigurationError(f"variant {kind!r} has no learned scores")


# --- batched gates ------------------------------------------------------------

@dataclass
class GateState:
    """Gate values for a packed batch; tensors are differentiable."""

    lam: Tensor  # (B, L) instruction mass per key position
    w: Tensor  # (B, L), zero outside content positions
    eta: Tensor  # (B, M)
    beta: Tensor  # (B, M), zero for absent modalities
    inner_fallback: np.ndarray  # (B, M) bool
    stream_fallback: np.ndarray  # (B,) bool
    epsilon: float = EPSILON

    def report(self, packed: PackedLayout, b: int) -> GateReport:
        lay = packed.layouts[b]
        rep = GateReport(stream_fallback=bool(self.stream_fallback[b]), epsilon=self.epsilon)
        for m, span in lay.content_spans.items():
            j = packed.column(m)
            sl = slice(span.start, span.stop)
            rep.lam[m] = self.lam.data[b, sl].copy()
            rep.w[m] = self.w.data[b, sl].copy()
            rep.eta[m] = float(self.eta.data[b, j])
            rep.beta[m] = float(self.beta.data[b, j])
            rep.inner_fallback[m] = bool(self.inner_fallback[b, j])
        return rep


def _spread(per_modality, membership: np.ndarray) -> Tensor:
    """(B, M) values onto positions via (B, M, L) one-hot membership -> (B, L)."""
    b, m = per_modality.shape
    return ops.sum(ops.mul(ops.reshape(per_modality, (b, m, 1)), membership), axis=1)


def attention_token_weights(lam, packed: PackedLayout, epsilon: float = EPSILON):
    content = packed.content
    is_content = packed.is_content
    totals = ops.segment_sum(lam, content)  # (B, M)
    counts = content.sum(axis=2)
    inner_fb = packed.available & (totals.data < epsilon)
    fb_pos = np.einsum("bml,bm->bl", content, inner_fb.astype(float)) > 0
    normal = is_content & ~fb_pos
    denom = ops.where(normal, _spread(totals, content), 1.0)
    count_pos = np.einsum("bml,bm->bl", content, counts)
    uniform = np.where(is_content, 1.0 / np.where(is_content, count_pos, 1.0), 0.0)
    w = ops.where(normal, ops.div(lam, denom), uniform)
    return w, totals, inner_fb


def stream_coefficients(lam, packed: PackedLayout, threshold: float = STREAM_THRESHOLD):
    eta = ops.segment_sum(lam, packed.control)  # (B, M)
    total = ops.sum(eta, axis=1)
    fb = total.data < threshold
    n_avail = np.maximum(packed.available.sum(axis=1), 1)
    normal = packed.available & ~fb[:, None]
    safe_total = ops.where(~fb, total, 1.0)
    uniform = np.where(packed.available, 1.0 / n_avail[:, None], 0.0)
    beta = ops.where(normal, ops.div(eta, ops.reshape(safe_total, (-1, 1))), uniform)
    return beta, eta, fb


def masked_softmax_over(logits, visible: np.ndarray) -> Tensor:
    """Softmax over the last axis where rows with nothing visible yield zeros."""
    empty = ~visible.any(axis=-1, keepdims=True)
    vis = visible.copy()
    vis[..., :1] |= empty
    p = ops.masked_softmax(logits, vis)
    return ops.mul(p, (~empty).astype(float))


def compute_gates(
    attn,
    packed: PackedLayout,
    level: str,
    variant: GateVariant,
    epsilon: float = EPSILON,
    threshold: float = STREAM_THRESHOLD,
    h=None,
    params: dict | None = None,
) -> GateState:
    """Token weights and stream coefficients for a packed batch.

    ``level`` is one of attention-only / attention+inner / full.  ``h`` is the
    fusion-layer input (B, L, d), needed by the learned variants.
    """
    lam = ops.query_mass(attn, packed.instruction)
    b, m = packed.available.shape
    none_b = np.zeros(b, dtype=bool)
    if level == "attention-only":
        is_content = packed.is_content
        counts = np.einsum("bml,bm->bl", packed.content, packed.content.sum(axis=2))
        w = ops.as_tensor(np.where(is_content, 1.0 / np.where(is_content, counts, 1.0), 0.0))
        ones = ops.as_tensor(packed.available.astype(float))
        return GateState(lam, w, ops.as_tensor(np.zeros((b, m))), ones, np.zeros((b, m), bool), none_b, epsilon)

    if variant.kind == CROSS_ATTN_SCORE:
        logits = cross_attn_token_logits(h, packed.instruction, params["xattn.wq"], params["xattn.wk"])
        bm_logits = ops.add(ops.as_tensor(np.zeros((b, m, 1))), ops.reshape(logits, (b, 1, -1)))
        per_mod = masked_softmax_over(bm_logits, packed.content > 0)
        w = ops.sum(ops.mul(per_mod, packed.content), axis=1)
        inner_fb = np.zeros((b, m), dtype=bool)
    else:
        w, _, inner_fb = attention_token_weights(lam, packed, epsilon)

    if level == "attention+inner":
        ones = ops.as_tensor(packed.available.astype(float))
        return GateState(lam, w, ops.as_tensor(np.zeros((b, m))), ones, inner_fb, none_b, epsilon)
    if level != "full":
        raise ConfigurationError(f"unknown component level {level!r}")

    if variant.kind == MLP_SCORE:
        n_ctrl = np.maximum(packed.control.sum(axis=2, keepdims=True), 1.0)
        controls = ops.div(ops.segment_sum(h, packed.control), n_ctrl)
        n_inst = np.maximum(packed.instruction.sum(axis=1), 1.0)
        inst_mean = ops.div(
            ops.reshape(ops.segment_sum(h, packed.instruction[:, None, :]), (b, -1)), n_inst[:, None]
        )
        logits = mlp_stream_logits(inst_mean, controls, params["mlp.w1"], params["mlp.b1"],
                                   params["mlp.w2"], params["mlp.b2"])
        beta = masked_softmax_over(logits, packed.available)
        eta = ops.segment_sum(lam, packed.control)
        stream_fb = none_b
    else:
        beta, eta, stream_fb = stream_coefficients(lam, packed, threshold)
    return GateState(lam, w, eta, beta, inner_fb, stream_fb, epsilon)


def gate_outputs(o, state: GateState, packed: PackedLayout, level: str, variant: GateVariant,
                 tanh_gates=None) -> Tensor:
    """Apply the gates to the attention output ``o`` (B, L, d) at content positions.

    Control and instruction positions pass through unchanged.
    """
    if level == "attention-only":
        return o
    b, length, _ = o.shape
    if variant.kind == FLAMINGO_TANH and level == "full":
        per_mod = ops.add(ops.as_tensor(np.zeros((b, len(packed.modalities)))), ops.tanh(tanh_gates))
        g = _spread(per_mod, packed.content)
        return ops.add(o, ops.mul(ops.reshape(g, (b, length, 1)), o))
    beta_pos = _spread(state.beta, packed.content)
    scale = ops.reshape(ops.mul(beta_pos, state.w), (b, length, 1))
    if variant.kind == NO_RESIDUAL and level == "full":
        return ops.mul(ops.where(packed.is_content[:, :, None], scale, 1.0), o)
    return ops.add(o, ops.mul(scale, o))
