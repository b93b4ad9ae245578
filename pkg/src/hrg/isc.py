"""Masked sample-axis attention at every temporal position (inter-video correlation)."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .attention import init_linear, multihead, split_heads
from .tensor import DimensionError, Tensor


class MaskStrategy(str, enum.Enum):
    ADAPTIVE = "adaptive"
    SUPPORT_SUPPORT = "support-support"
    QUERY_SUPPORT = "query-support"
    FULL = "full"


def build_mask(strategy, N: int, K: int, L: int) -> np.ndarray:
    """Binary (NK+L, NK+L) gate; rows attend, columns are attended.

    Support indices come first (class-major), queries last.
    """
    strategy = MaskStrategy(strategy)
    ns = N * K
    if ns < 1 or L < 0:
        raise ValueError("need N*K >= 1 and L >= 0")
    S = ns + L
    rows = np.arange(S)[:, None]
    cols = np.arange(S)[None, :]
    if strategy is MaskStrategy.ADAPTIVE:
        j = np.broadcast_to(cols < ns, (S, S))
    elif strategy is MaskStrategy.SUPPORT_SUPPORT:
        j = (rows < ns) & (cols < ns)
    elif strategy is MaskStrategy.QUERY_SUPPORT:
        j = (rows >= ns) & (cols < ns)
    else:
        j = np.ones((S, S), dtype=bool)
    return j.astype(np.float64)


@dataclass
class IscParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln_g: Tensor
    ln_b: Tensor
    num_heads: int = 2

    @classmethod
    def init(cls, rng, C: int, num_heads: int = 2):
        if C % num_heads:
            raise DimensionError(f"C={C} not divisible by num_heads={num_heads}")
        return cls(init_linear(rng, C, C), init_linear(rng, C, C), init_linear(rng, C, C),
                   init_linear(rng, C, C), Tensor(np.ones(C), requires_grad=True),
                   Tensor(np.zeros(C), requires_grad=True), num_heads)

    def named(self, prefix: str = "isc") -> dict:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("wq", "wk", "wv", "wo", "ln_g", "ln_b")}


def inter_video_correlate(f_s: Tensor, f_q: Tensor, mask, params: IscParams, return_weights: bool = False):
    """Attend across videos at each temporal position.

    ``f_s`` is (NK, T, C), ``f_q`` is (L, T, C). Rows of ``mask`` that are all
    zero pass their input through unchanged.
    """
    if f_s.ndim != 3 or f_q.ndim != 3 or f_s.shape[1:] != f_q.shape[1:]:
        raise DimensionError(f"support {f_s.shape} and query {f_q.shape} must be (*, T, C) with equal T, C")
    ns, L = f_s.shape[0], f_q.shape[0]
    S = ns + L
    mask = np.asarray(mask)
    if mask.shape != (S, S):
        raise DimensionError(f"mask must be {(S, S)}, got {mask.shape}")
    x = tn.concat([f_s, f_q], axis=0).transpose(1, 0, 2)          # (T, S, C)
    h = tn.layer_norm(x, params.ln_g, params.ln_b)
    upd, w = multihead(h, h, params.wq, params.wk, params.wv, params.wo,
                       params.num_heads, mask=mask, return_weights=True)
    active = mask.any(axis=1)[None, :, None]
    y = tn.where(active, x + upd, x).transpose(1, 0, 2)           # (S, T, C)
    out = (y[:ns], y[ns:])
    return (*out, w) if return_weights else out


def count_interaction_macs(mode: str, N: int, K: int, L: int, T: int, C: int, heads: int = 1) -> dict:
    """Run the score and value-mixing stages under a MAC counter.

    ``factorized`` attends over the NK+L videos separately at each of the T
    positions; ``dense`` attends over all (NK+L)*T frame tokens at once.
    """
    if C % heads:
        raise DimensionError(f"C={C} not divisible by heads={heads}")
    S = N * K + L
    if mode == "factorized":
        tokens = Tensor(np.zeros((T, S, C)))
    elif mode == "dense":
        tokens = Tensor(np.zeros((1, S * T, C)))
    else:
        raise ValueError(f"mode must be 'factorized' or 'dense', got {mode!r}")
    with tn.no_grad():
        qh = split_heads(tokens, heads)
        with tn.counting() as score:
            scores = qh @ tn.swap_last(qh)
        weights = tn.softmax(scores, axis=-1)
        with tn.counting() as value:
            weights @ qh
    return {"score": score.mac_count, "value": value.mac_count,
            "total": score.mac_count + value.mac_count}
