"""Multi-head attention shared by the temporal encoder, ISC and IKT blocks."""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .tensor import DimensionError, Tensor


def init_linear(rng, n_in: int, n_out: int, std: float = 0.02) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=(n_in, n_out)), requires_grad=True)


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., S, C) -> (..., heads, S, C/heads)"""
    *lead, S, C = x.shape
    if C % heads:
        raise DimensionError(f"channel width {C} not divisible by {heads} heads")
    y = x.reshape(*lead, S, heads, C // heads)
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return y.transpose(*axes)


def merge_heads(x: Tensor) -> Tensor:
    *lead, H, S, D = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return x.transpose(*axes).reshape(*lead, S, H * D)


def attention_weights(q: Tensor, k: Tensor, heads: int, mask=None) -> Tensor:
    """Scaled dot-product weights (..., heads, Sq, Sk) for already-projected q, k."""
    qh, kh = split_heads(q, heads), split_heads(k, heads)
    scores = (qh @ tn.swap_last(kh)) * (1.0 / np.sqrt(qh.shape[-1]))
    if mask is None:
        return tn.softmax(scores, axis=-1)
    return tn.masked_softmax(scores, mask, axis=-1)


def multihead(xq: Tensor, xkv: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
              heads: int, mask=None, return_weights: bool = False):
    """Multi-head attention of ``xq`` tokens over ``xkv`` tokens (no biases).

    ``mask`` is a 0/1 array broadcastable to (..., heads, Sq, Sk).
    """
    w = attention_weights(xq @ wq, xkv @ wk, heads, mask)
    out = merge_heads(w @ split_heads(xkv @ wv, heads)) @ wo
    return (out, w) if return_weights else out
