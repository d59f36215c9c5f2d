"""Differentiable primitives.

Each op computes its value with numpy (or a kernel) and, when any input is
tracked, records a backward closure on that input's tape.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import DimensionError, InvalidMaskError
from . import kernels
from .tensor import DTYPE, Tensor

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=DTYPE)


def _result(data: np.ndarray, parents, backward) -> Tensor:
    for p in parents:
        if isinstance(p, Tensor) and p.tape is not None:
            return p.tape.record(data, parents, backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    return _result(ad + bd, (a, b), lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(g, bd.shape)))


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    return _result(ad - bd, (a, b), lambda g: (_unbroadcast(g, ad.shape), _unbroadcast(-g, bd.shape)))


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    return _result(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = ad / bd
    return _result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    return _result(-_data(a), (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    out = np.exp(_data(a))
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    ad = _data(a)
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    out = np.tanh(_data(a))
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    x = _data(a)
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), bwd)


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is a constant mask."""
    cond = np.asarray(cond, dtype=bool)
    ad, bd = _data(a), _data(b)
    out = np.where(cond, ad, bd)
    return _result(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(np.where(cond, g, 0.0), ad.shape),
            _unbroadcast(np.where(cond, 0.0, g), bd.shape),
        ),
    )


# --- reductions and shape ---------------------------------------------------

def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    ad = _data(a)
    out = ad.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, ad.shape).copy(),)

    return _result(np.asarray(out), (a,), bwd)


def mean(a, axis=None, keepdims=False) -> Tensor:
    ad = _data(a)
    n = ad.size if axis is None else np.prod([ad.shape[i] for i in np.atleast_1d(axis)])
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def reshape(a, shape) -> Tensor:
    ad = _data(a)
    return _result(ad.reshape(shape), (a,), lambda g: (g.reshape(ad.shape),))


def transpose(a, axes=None) -> Tensor:
    ad = _data(a)
    axes = tuple(axes) if axes is not None else tuple(reversed(range(ad.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(ad.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a, idx) -> Tensor:
    ad = _data(a)
    out = ad[idx]

    def bwd(g):
        full = np.zeros(ad.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out, dtype=DTYPE), (a,), bwd)


def take(a, indices: np.ndarray) -> Tensor:
    """Gather rows of ``a`` (first axis) by an integer index array of any shape."""
    ad = _data(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = ad[indices]

    def bwd(g):
        full = np.zeros(ad.shape)
        np.add.at(full, indices.reshape(-1), g.reshape((-1,) + ad.shape[1:]))
        return (full,)

    return _result(out, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    datas = [_data(t) for t in tensors]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return _result(out, tuple(tensors), lambda g: tuple(np.split(g, bounds, axis=axis)))


# --- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy broadcasting over leading dimensions.

    When ``b`` is a single matrix, ``a`` is flattened to rows so that every
    output row depends only on its own input row; this keeps results
    independent of how many rows are processed together.
    """
    ad, bd = _data(a), _data(b)
    if ad.ndim == 0 or bd.ndim == 0 or ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise DimensionError(f"matmul: cannot multiply shapes {ad.shape} and {bd.shape}")
    if bd.ndim == 2 and ad.ndim >= 1:
        rows = ad.reshape(-1, ad.shape[-1])
        n = bd.shape[1]
        # BLAS rounds single rows and narrow column remainders (n % 8 in 1..3)
        # through kernels whose result depends on the batch height; zero
        # padding keeps every row on the same path
        bp = bd
        if n % 8 in (1, 2, 3):
            bp = np.hstack([bd, np.zeros((bd.shape[0], 4 - n % 4))])
        if rows.shape[0] == 1:
            out = (np.vstack([rows, np.zeros_like(rows)]) @ bp)[:1, :n]
        else:
            out = (rows @ bp)[:, :n]
        out = out.reshape(ad.shape[:-1] + (n,))

        def bwd(g):
            g2 = g.reshape(-1, bd.shape[1])
            return (g @ bd.T, rows.T @ g2)

        return _result(out, (a, b), bwd)

    out = np.matmul(ad, bd)

    def bwd_general(g):
        a2 = ad if ad.ndim > 1 else ad[None, :]
        b2 = bd if bd.ndim > 1 else bd[:, None]
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        da = np.matmul(g2, np.swapaxes(b2, -1, -2))
        db = np.matmul(np.swapaxes(a2, -1, -2), g2)
        if ad.ndim == 1:
            da = da.squeeze(-2)
        if bd.ndim == 1:
            db = db.squeeze(-1)
        return (_unbroadcast(da, ad.shape), _unbroadcast(db, bd.shape))

    return _result(out, (a, b), bwd_general)


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


# --- fused primitives ---------------------------------------------------------

def mask_bias(visible: np.ndarray) -> np.ndarray:
    """Additive mask: 0 at visible positions, negative infinity elsewhere."""
    return np.where(np.asarray(visible, dtype=bool), 0.0, -np.inf)


def masked_softmax(x, visible: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; invisible positions get probability exactly 0.

    ``visible`` is boolean and broadcastable to ``x``.  A row with no
    visible position raises :class:`InvalidMaskError`.
    """
    xd = _data(x)
    if xd.ndim == 0:
        raise DimensionError("masked_softmax needs at least one axis")
    n = xd.shape[-1]
    rows = xd.reshape(-1, n)
    if visible is None:
        vis = np.ones(rows.shape, dtype=bool)
    else:
        visible = np.asarray(visible, dtype=bool)
        try:
            vis = np.broadcast_to(visible, xd.shape).reshape(-1, n)
        except ValueError:
            raise DimensionError(
                f"masked_softmax: mask shape {visible.shape} does not fit scores {xd.shape}"
            ) from None
    p = kernels.softmax_fwd(rows, vis)
    out = p.reshape(xd.shape)
    return _result(out, (x,), lambda g: (kernels.softmax_bwd(p, g.reshape(-1, n)).reshape(xd.shape),))


def log_softmax(x) -> Tensor:
    xd = _data(x)
    m = xd.max(axis=-1, keepdims=True)
    shifted = xd - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)
    return _result(out, (x,), lambda g: (g - sm * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` (N, V)."""
    lp = log_softmax(logits)
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    n = targets.shape[0]
    picked = index(reshape(lp, (n, -1)), (np.arange(n), targets))
    return div(sum(picked), -float(n))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    xd = _data(x)
    gd = _data(gamma)
    if xd.shape[-1] != gd.shape[-1] or gd.shape != _data(beta).shape:
        raise DimensionError(
            f"layer_norm: features {xd.shape[-1]} vs gamma {gd.shape} / beta {_data(beta).shape}"
        )
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gd + _data(beta)

    def bwd(g):
        dxhat = g * gd
        dx = inv * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(xd.ndim - 1))
        return (dx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _result(out, (x, gamma, beta), bwd)


def attention_scores(q, k, scale: float) -> Tensor:
    """Scaled dot products (..., Lq, D) x (..., Lk, D) -> (..., Lq, Lk)."""
    qd, kd = _data(q), _data(k)
    if qd.shape[-1] != kd.shape[-1] or qd.shape[:-2] != kd.shape[:-2]:
        raise DimensionError(f"attention_scores: shapes {qd.shape} and {kd.shape} disagree")
    lead = qd.shape[:-2]
    q3 = qd.reshape((-1,) + qd.shape[-2:])
    k3 = kd.reshape((-1,) + kd.shape[-2:])
    out = kernels.scores_fwd(q3, k3, scale).reshape(lead + (qd.shape[-2], kd.shape[-2]))

    def bwd(g):
        dq, dk = kernels.scores_bwd(g.reshape((-1,) + g.shape[-2:]), q3, k3, scale)
        return dq.reshape(qd.shape), dk.reshape(kd.shape)

    return _result(out, (q, k), bwd)


def attend(p, v) -> Tensor:
    """Probability-weighted values (..., Lq, Lk) x (..., Lk, D) -> (..., Lq, D)."""
    pd, vd = _data(p), _data(v)
    if pd.shape[-1] != vd.shape[-2] or pd.shape[:-2] != vd.shape[:-2]:
        raise DimensionError(f"attend: shapes {pd.shape} and {vd.shape} disagree")
    lead = pd.shape[:-2]
    p3 = pd.reshape((-1,) + pd.shape[-2:])
    v3 = vd.reshape((-1,) + vd.shape[-2:])
    out = kernels.attend_fwd(p3, v3).reshape(lead + (pd.shape[-2], vd.shape[-1]))

    def bwd(g):
        dp, dv = kernels.attend_bwd(g.reshape((-1,) + g.shape[-2:]), p3, v3)
        return dp.reshape(pd.shape), dv.reshape(vd.shape)

    return _result(out, (p, v), bwd)


def segment_sum(x, onehot: np.ndarray) -> Tensor:
    """Pool (B, L[, F]) by membership weights (B, M, L) -> (B, M[, F]).

    Sums run over positions in index order.
    """
    xd = _data(x)
    squeeze = xd.ndim == 2
    x3 = xd[:, :, None] if squeeze else xd
    onehot = np.asarray(onehot, dtype=DTYPE)
    if onehot.shape[0] != x3.shape[0] or onehot.shape[2] != x3.shape[1]:
        raise DimensionError(f"segment_sum: values {xd.shape} vs membership {onehot.shape}")
    out = kernels.segment_sum_fwd(x3, onehot)
    if squeeze:
        out = out[:, :, 0]

    def bwd(g):
        g3 = g[:, :, None] if squeeze else g
        dx = np.einsum("bml,bmf->blf", onehot, g3)
        return (dx[:, :, 0] if squeeze else dx,)

    return _result(out, (x,), bwd)


def query_mass(attn, rows: np.ndarray) -> Tensor:
    """Head-mean of attention mass from the selected query rows to every key.

    ``attn`` is (B, H, L, L); ``rows`` (B, L) selects the queries.  Returns (B, L).
    """
    ad = _data(attn)
    rows = np.asarray(rows, dtype=DTYPE)
    out = kernels.query_mass_fwd(ad, rows)
    n_heads = ad.shape[1]

    def bwd(g):
        d = rows[:, None, :, None] * g[:, None, None, :] / n_heads
        return (np.broadcast_to(d, ad.shape).copy(),)

    return _result(out, (attn,), bwd)


def rotary(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive feature pairs (2i, 2i+1) by precomputed angles.

    ``cos``/``sin`` broadcast against ``x[..., ::2]``.
    """
    xd = _data(x)

    def rot(a, c, s):
        out = np.empty_like(a)
        even, odd = a[..., 0::2], a[..., 1::2]
        out[..., 0::2] = even * c - odd * s
        out[..., 1::2] = even * s + odd * c
        return out

    out = rot(xd, cos, sin)
    # the transpose of a rotation is the rotation by the negated angle
    return _result(out, (x,), lambda g: (rot(g, cos, -sin),))
