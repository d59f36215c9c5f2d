"""Dense tensors, reverse-mode tape, and the attention kernels."""

from . import kernels, ops
from .ops import (
    attend,
    attention_scores,
    cross_entropy,
    layer_norm,
    mask_bias,
    masked_softmax,
    matmul,
    query_mass,
    segment_sum,
)
from .tensor import DTYPE, Tape, Tensor, backward

__all__ = [
    "DTYPE",
    "Tape",
    "Tensor",
    "attend",
    "attention_scores",
    "backward",
    "cross_entropy",
    "kernels",
    "layer_norm",
    "mask_bias",
    "masked_softmax",
    "matmul",
    "ops",
    "query_mass",
    "segment_sum",
]
