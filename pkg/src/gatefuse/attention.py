"""Multi-head self-attention with rotary position embedding.

The full attention tensor is returned alongside the output because the
gates read it directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DimensionError
from .numerics import Tensor, ops
from .sequence import AttentionMask

DEFAULT_ROPE_BASE = 10000.0


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    n_heads: int
    rope_base: float = DEFAULT_ROPE_BASE

    def __post_init__(self):
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv", "wo"):
            w = getattr(self, name)
            if w.shape != (d, d):
                raise DimensionError(f"{name} has shape {w.shape}, expected {(d, d)}")
        check_heads(d, self.n_heads)

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class AttentionOutput:
    output: Tensor  # (..., L, d)
    attn: Tensor  # (..., n_heads, L, L), rows are queries


def check_heads(d: int, n_heads: int) -> None:
    if n_heads < 1 or d % n_heads:
        raise ConfigurationError(f"width {d} is not divisible by {n_heads} heads")
    if (d // n_heads) % 2:
        raise ConfigurationError(f"head width {d // n_heads} is odd; rotary embedding pairs dimensions")


def rope_angles(positions: np.ndarray, d_head: int, base: float = DEFAULT_ROPE_BASE):
    """cos/sin tables of shape positions.shape + (d_head // 2,)."""
    if d_head % 2:
        raise ConfigurationError(f"head width {d_head} is odd; rotary embedding pairs dimensions")
    inv_freq = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    theta = np.asarray(positions, dtype=np.float64)[..., None] * inv_freq
    return np.cos(theta), np.sin(theta)


def apply_rope(x, positions, base: float = DEFAULT_ROPE_BASE) -> Tensor:
    """Rotate queries or keys shaped (..., L, n_heads, d_head) by token position.

    ``positions`` has shape (..., L).
    """
    shape = x.shape
    cos, sin = rope_angles(positions, shape[-1], base)
    return ops.rotary(x, cos[..., None, :], sin[..., None, :])


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, l, d = x.shape
    return x.reshape(b, l, n_heads, d // n_heads)


def multi_head_attention(
    h: Tensor,
    visible: np.ndarray,
    wq,
    wk,
    wv,
    wo,
    n_heads: int,
    rope_base: float = DEFAULT_ROPE_BASE,
    positions: np.ndarray | None = None,
    causal: bool = False,
) -> AttentionOutput:
    """Batched attention over ``h`` (B, L, d) with key visibility (B, L).

    Bidirectional unless ``causal``.  ``positions`` (B, L) defaults to 0..L-1.
    """
    b, length, d = h.shape
    check_heads(d, n_heads)
    visible = np.asarray(visible, dtype=bool)
    if visible.shape != (b, length):
        raise DimensionError(f"mask shape {visible.shape} does not match sequence {(b, length)}")
    if positions is None:
        positions = np.broadcast_to(np.arange(length), (b, length))
    d_head = d // n_heads

    q = apply_rope(_split_heads(ops.matmul(h, wq), n_heads), positions, rope_base)
    k = apply_rope(_split_heads(ops.matmul(h, wk), n_heads), positions, rope_base)
    v = _split_heads(ops.matmul(h, wv), n_heads)
    q = q.transpose(0, 2, 1, 3)
    k = k.transpose(0, 2, 1, 3)
    v = v.transpose(0, 2, 1, 3)

    scores = ops.attention_scores(q, k, 1.0 / math.sqrt(d_head))
    key_vis = visible[:, None, None, :]
    if causal:
        key_vis = key_vis & np.tril(np.ones((length, length), dtype=bool))[None, None]
    attn = ops.masked_softmax(scores, key_vis)
    heads = ops.attend(attn, v).transpose(0, 2, 1, 3).reshape(b, length, d)
    return AttentionOutput(ops.matmul(heads, wo), attn)


def self_attention(h, mask: AttentionMask, params: AttentionParams) -> AttentionOutput:
    """Single-sequence attention: ``h`` is (L, d); returns output (L, d), attn (H, L, L)."""
    h = ops.as_tensor(h)
    if h.ndim != 2 or h.shape[1] != params.d_model:
        raise DimensionError(f"input shape {h.shape} does not match model width {params.d_model}")
    if len(mask.visible) != h.shape[0]:
        raise DimensionError(f"mask length {len(mask.visible)} != sequence length {h.shape[0]}")
    out = multi_head_attention(
        h.reshape(1, *h.shape),
        mask.visible[None, :],
        params.wq,
        params.wk,
        params.wv,
        params.wo,
        params.n_heads,
        params.rope_base,
    )
    return AttentionOutput(out.output.reshape(h.shape), out.attn.reshape(out.attn.shape[1:]))
