"""Kernel backend selection.

The compiled extension is used when it imports; otherwise, or when
``GATEFUSE_PURE_PYTHON`` is set to a non-empty value, the numpy kernels
are used.  :func:`use_backend` switches at runtime (tests, benchmarks).
"""

from __future__ import annotations

import os
from contextlib import contextmanager

import numpy as np

from ..errors import InvalidMaskError
from . import _kernels_py

try:
    from . import _kernels_c
except ImportError:  # pragma: no cover - depends on the build
    _kernels_c = None

_BACKENDS = {"python": _kernels_py}
if _kernels_c is not None:
    _BACKENDS["cython"] = _kernels_c

if os.environ.get("GATEFUSE_PURE_PYTHON") or _kernels_c is None:
    _impl = _kernels_py
else:
    _impl = _kernels_c


def backend() -> str:
    return "cython" if _impl is _kernels_c else "python"


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def use_backend(name: str) -> None:
    global _impl
    try:
        _impl = _BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} not available; have {available_backends()}") from None


@contextmanager
def backend_scope(name: str):
    previous = backend()
    use_backend(name)
    try:
        yield
    finally:
        use_backend(previous)


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def softmax_fwd(x: np.ndarray, visible: np.ndarray) -> np.ndarray:
    vis = np.ascontiguousarray(visible, dtype=np.uint8)
    if vis.shape[1] == 0 or not vis.any(axis=1).all():
        raise InvalidMaskError("masked_softmax: at least one row has every position masked")
    return _impl.softmax_fwd(_c(x), vis)


def softmax_bwd(p: np.ndarray, g: np.ndarray) -> np.ndarray:
    return _impl.softmax_bwd(_c(p), _c(g))


def scores_fwd(q: np.ndarray, k: np.ndarray, scale: float) -> np.ndarray:
    return _impl.scores_fwd(_c(q), _c(k), float(scale))


# The two backward contractions are plain batched matmuls; BLAS beats a
# compiled loop there and gradients carry no padding bit-identity contract.
def scores_bwd(g, q, k, scale):
    return _kernels_py.scores_bwd(_c(g), _c(q), _c(k), float(scale))


def attend_fwd(p: np.ndarray, v: np.ndarray) -> np.ndarray:
    return _impl.attend_fwd(_c(p), _c(v))


def attend_bwd(g, p, v):
    return _kernels_py.attend_bwd(_c(g), _c(p), _c(v))


def segment_sum_fwd(x: np.ndarray, onehot: np.ndarray) -> np.ndarray:
    return _impl.segment_sum_fwd(_c(x), _c(onehot))


def query_mass_fwd(attn: np.ndarray, rows: np.ndarray) -> np.ndarray:
    return _impl.query_mass_fwd(_c(attn), _c(rows))
