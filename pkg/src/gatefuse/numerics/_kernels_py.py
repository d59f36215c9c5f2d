"""Pure-numpy reference kernels.

Every reduction that runs over a sequence axis is accumulated in index
order with an explicit loop.  Padding and masked entries then contribute
exact zeros, which keeps results bit-identical when a sequence is padded
to a longer length.  Reductions over feature axes (fixed width) may use
vectorised numpy sums.
"""

from __future__ import annotations

import numpy as np


def softmax_fwd(x: np.ndarray, visible: np.ndarray) -> np.ndarray:
    """Row softmax of ``x`` (R, N) restricted to ``visible`` entries."""
    neg = np.where(visible, x, -np.inf)
    m = neg.max(axis=1, keepdims=True)
    e = np.exp(neg - m)
    total = np.zeros(x.shape[0])
    for j in range(x.shape[1]):
        total += e[:, j]
    return e / total[:, None]


def softmax_bwd(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    dot = np.einsum("rn,rn->r", p, g)
    return p * (g - dot[:, None])


def scores_fwd(q: np.ndarray, k: np.ndarray, scale: float) -> np.ndarray:
    """(G, Lq, D) x (G, Lk, D) -> (G, Lq, Lk) scaled dot products."""
    out = np.zeros((q.shape[0], q.shape[1], k.shape[1]))
    for d in range(q.shape[2]):
        out += q[:, :, None, d] * k[:, None, :, d]
    return out * scale


def scores_bwd(g: np.ndarray, q: np.ndarray, k: np.ndarray, scale: float):
    gs = g * scale
    return np.matmul(gs, k), np.matmul(gs.transpose(0, 2, 1), q)


def attend_fwd(p: np.ndarray, v: np.ndarray) -> np.ndarray:
    """(G, Lq, Lk) x (G, Lk, D) -> (G, Lq, D), summed over keys in order."""
    out = np.zeros((p.shape[0], p.shape[1], v.shape[2]))
    for j in range(p.shape[2]):
        out += p[:, :, j, None] * v[:, None, j, :]
    return out


def attend_bwd(g: np.ndarray, p: np.ndarray, v: np.ndarray):
    return np.matmul(g, v.transpose(0, 2, 1)), np.matmul(p.transpose(0, 2, 1), g)


def segment_sum_fwd(x: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    """(B, L, F) pooled by (B, M, L) membership weights -> (B, M, F)."""
    out = np.zeros((x.shape[0], onehot.shape[1], x.shape[2]))
    for t in range(x.shape[1]):
        out += onehot[:, :, t, None] * x[:, None, t, :]
    return out


def query_mass_fwd(attn: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Head-averaged attention mass that the selected query rows send to each key.

    ``attn`` is (B, H, L, L) with rows = queries; ``rows`` is (B, L) in {0, 1}.
    """
    b, h, lq, lk = attn.shape
    total = np.zeros((b, lk))
    for head in range(h):
        acc = np.zeros((b, lk))
        for i in range(lq):
            acc += rows[:, i, None] * attn[:, head, i, :]
        total += acc
    return total / h
