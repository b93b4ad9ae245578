"""Temporal alignment metrics, class prototypes and the episode loss."""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .tensor import Tensor

METRICS = ("otam", "bimhm")


def cosine_distance(q: Tensor, s: Tensor) -> Tensor:
    """Frame distance matrices ``1 - cos(q_i, s_j)``.

    ``q`` is (A, Tq, C) and ``s`` is (B, Ts, C); the result is (A, B, Tq, Ts).
    Two 2-D inputs give a single (Tq, Ts) matrix.
    """
    if q.ndim == 2 and s.ndim == 2:
        return cosine_distance(q.reshape(1, *q.shape), s.reshape(1, *s.shape)).reshape(q.shape[0], s.shape[0])
    A, Tq, C = q.shape
    B, Ts, _ = s.shape
    qn = tn.l2_normalize(q).reshape(A * Tq, C)
    sn = tn.l2_normalize(s).reshape(B * Ts, C)
    sim = (qn @ tn.transpose(sn)).reshape(A, Tq, B, Ts).transpose(0, 2, 1, 3)
    return 1.0 - sim


def class_prototype(sequences: Tensor) -> Tensor:
    """Frame-wise mean of K sequences, (K, T, C) -> (T, C)."""
    return sequences.mean(axis=0)


def class_prototypes(support: Tensor, way: int, shot: int) -> Tensor:
    """Per-class frame-wise means of class-major support features (N*K, T, C) -> (N, T, C)."""
    T, C = support.shape[1:]
    return support.reshape(way, shot, T, C).mean(axis=1)


def _softmin3(a, b, c, gamma):
    stack = np.stack([a, b, c])
    if gamma == 0:
        return stack.min(axis=0)
    lo = stack.min(axis=0)
    with np.errstate(invalid="ignore"):
        z = np.exp(-(stack - lo) / gamma)
    return lo - gamma * np.log(z.sum(axis=0))


def soft_dtw(d: Tensor, gamma: float = 0.0) -> Tensor:
    """Monotone alignment cost of every matrix in ``d`` (..., Tq, Ts).

    Paths start at (0, 0), end at (Tq-1, Ts-1) and move right, down or
    diagonally. ``gamma == 0`` takes the hard minimum over paths; ``gamma > 0``
    replaces each min in the recursion with ``-gamma * log(sum(exp(-x/gamma)))``.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    if d.ndim < 2 or d.shape[-1] < 1 or d.shape[-2] < 1:
        raise ValueError("soft_dtw needs non-empty matrices")
    lead = d.shape[:-2]
    n, m = d.shape[-2:]
    D = d.data.reshape(-1, n, m)
    B = D.shape[0]
    R = np.full((B, n + 1, m + 1), np.inf)
    R[:, 0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            R[:, i, j] = D[:, i - 1, j - 1] + _softmin3(R[:, i - 1, j], R[:, i, j - 1], R[:, i - 1, j - 1], gamma)
    out = R[:, n, m].reshape(lead)

    def backward(g):
        E = np.zeros((B, n + 2, m + 2))
        E[:, n, m] = 1.0
        Rp = np.full((B, n + 2, m + 2), -np.inf)
        Rp[:, 1:n + 1, 1:m + 1] = R[:, 1:, 1:]
        Dp = np.zeros((B, n + 2, m + 2))
        Dp[:, 1:n + 1, 1:m + 1] = D
        for i in range(n, 0, -1):
            for j in range(m, 0, -1):
                if i == n and j == m:
                    continue
                acc = np.zeros(B)
                for di, dj in ((1, 0), (0, 1), (1, 1)):
                    si, sj = i + di, j + dj
                    if si > n or sj > m:
                        continue
                    # weight of predecessor (i, j) in the soft-min at (si, sj)
                    smin = Rp[:, si, sj] - Dp[:, si, sj]
                    if gamma == 0:
                        w = _hard_weight(R, i, j, si, sj, (di, dj))
                    else:
                        w = np.exp((smin - Rp[:, i, j]) / gamma)
                    acc += E[:, si, sj] * w
                E[:, i, j] = acc
        grad = E[:, 1:n + 1, 1:m + 1] * np.asarray(g).reshape(-1, 1, 1)
        return (grad.reshape(d.shape),)

    return tn.make(out, (d,), backward)


def _hard_weight(R, i, j, si, sj, move):
    # first argmin among (up, left, diag) predecessors of (si, sj)
    cand = np.stack([R[:, si - 1, sj], R[:, si, sj - 1], R[:, si - 1, sj - 1]])
    arg = cand.argmin(axis=0)
    which = {(1, 0): 0, (0, 1): 1, (1, 1): 2}[move]
    return (arg == which).astype(np.float64)


def dtw_distance(d, gamma: float = 0.0) -> Tensor:
    return soft_dtw(tn.as_tensor(d), gamma)


def bimhm_distance(d) -> Tensor:
    """Bidirectional mean Hausdorff distance of (..., Tq, Ts) matrices."""
    d = tn.as_tensor(d)
    return (tn.tmin(d, axis=-1).mean(axis=-1) + tn.tmin(d, axis=-2).mean(axis=-1)) * 0.5


def episode_logits(queries: Tensor, prototypes: Tensor, metric: str = "otam",
                   gamma: float = 0.1, tau: float = 0.1) -> Tensor:
    """Logits (L, N) equal to minus the query/prototype distance over ``tau``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    d = cosine_distance(queries, prototypes)
    if metric == "otam":
        dist = soft_dtw(d, gamma)
    elif metric == "bimhm":
        dist = bimhm_distance(d)
    else:
        raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")
    return dist * (-1.0 / tau)


cross_entropy = tn.cross_entropy
