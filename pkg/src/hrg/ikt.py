"""Inter-task knowledge transfer: temporal prototypes and a momentum knowledge bank."""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .attention import init_linear, multihead
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)


class FrozenBankError(RuntimeError):
    """The bank is frozen and cannot be updated."""


def _cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.maximum(np.linalg.norm(a, axis=-1, keepdims=True), tn.NORM_EPS)
    bn = b / np.maximum(np.linalg.norm(b, axis=-1, keepdims=True), tn.NORM_EPS)
    return an @ bn.T


class KnowledgeBank:
    """Fixed-capacity store of memory vectors carried across tasks."""

    def __init__(self, capacity: int, width: int, momentum: float = 0.99):
        if capacity < 1 or width < 1:
            raise ValueError("bank capacity and width must be positive")
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        self.capacity = capacity
        self.width = width
        self.momentum = float(momentum)
        self.entries = np.zeros((capacity, width))
        self.occupancy = 0
        self.frozen = False

    @property
    def stored(self) -> np.ndarray:
        return self.entries[:self.occupancy]

    def freeze(self) -> None:
        self.frozen = True

    def unfreeze(self) -> None:
        self.frozen = False

    def update(self, prototypes: np.ndarray) -> None:
        """Insert each prototype row, or blend it into its most similar entry once full."""
        if self.frozen:
            raise FrozenBankError("knowledge bank is frozen; updates are disabled")
        mu = self.momentum
        for p in np.asarray(prototypes, dtype=np.float64):
            if not np.all(np.isfinite(p)):
                raise ValueError("refusing to store a non-finite prototype")
            if self.occupancy < self.capacity:
                self.entries[self.occupancy] = p
                self.occupancy += 1
            else:
                t = int(np.argmax(_cosine(p[None, :], self.entries)[0]))
                self.entries[t] = mu * self.entries[t] + (1.0 - mu) * p

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<IIdB", self.capacity, self.occupancy, self.momentum, self.frozen))
        h.update(self.entries.tobytes())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        head = struct.pack("<IId", self.capacity, self.occupancy, self.momentum)
        return head + self.stored.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes, width: int) -> tuple:
        """Parse a serialized bank; returns ``(bank, bytes_consumed)``."""
        capacity, occupancy, mu = struct.unpack_from("<IId", raw, 0)
        if occupancy > capacity:
            raise ValueError(f"bank occupancy {occupancy} exceeds capacity {capacity}")
        n = occupancy * width * 8
        bank = cls(capacity, width, mu)
        bank.entries[:occupancy] = np.frombuffer(raw[16:16 + n], dtype="<f8").reshape(occupancy, width)
        bank.occupancy = occupancy
        return bank, 16 + n


def update_bank(bank: KnowledgeBank, prototypes) -> None:
    bank.update(prototypes.data if isinstance(prototypes, Tensor) else prototypes)


def freeze_bank(bank: KnowledgeBank) -> None:
    bank.freeze()


def unfreeze_bank(bank: KnowledgeBank) -> None:
    bank.unfreeze()


@dataclass
class IktParams:
    prototypes: Tensor    # (M, C) learnable temporal prototypes
    wk_t: Tensor
    wv_t: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln_g: Tensor
    ln_b: Tensor
    num_heads: int = 2

    @classmethod
    def init(cls, rng, C: int, M: int = 3, num_heads: int = 2, proto_std: float | None = None):
        if M < 1:
            raise ValueError("need at least one prototype")
        if C % num_heads:
            raise DimensionError(f"C={C} not divisible by num_heads={num_heads}")
        proto_std = 1.0 / math.sqrt(C) if proto_std is None else proto_std
        lin = [init_linear(rng, C, C) for _ in range(6)]
        return cls(Tensor(rng.normal(0.0, proto_std, size=(M, C)), requires_grad=True), *lin,
                   Tensor(np.ones(C), requires_grad=True), Tensor(np.zeros(C), requires_grad=True),
                   num_heads)

    def named(self, prefix: str = "ikt") -> dict:
        keys = ("prototypes", "wk_t", "wv_t", "wq", "wk", "wv", "wo", "ln_g", "ln_b")
        return {f"{prefix}.{k}": getattr(self, k) for k in keys}


def construct_prototypes(p: Tensor, f_s: Tensor, params: IktParams) -> Tensor:
    """Summarize support frames into M prototypes: softmax(P K^T / sqrt(C)) V + P."""
    if f_s.ndim != 3 or p.ndim != 2 or p.shape[1] != f_s.shape[2]:
        raise DimensionError(f"prototypes {p.shape} incompatible with support {f_s.shape}")
    C = p.shape[1]
    tokens = f_s.reshape(-1, C)
    keys, values = tokens @ params.wk_t, tokens @ params.wv_t
    w = tn.softmax((p @ tn.transpose(keys)) * (1.0 / math.sqrt(C)), axis=-1)
    return w @ values + p


def retrieval_count(kappa: float, occupancy: int) -> int:
    return max(1, int(math.floor(kappa * occupancy + 1e-9)))


def top_indices(sim: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` largest entries per row, ties to the lower index."""
    order = np.argsort(-sim, axis=1, kind="stable")
    return order[:, :count]


def retrieve(p_hat: Tensor, bank: KnowledgeBank, kappa: float, weighting: str = "softmax") -> Tensor:
    """Weighted sum of the most similar bank entries for every prototype row.

    Gradient flows into ``p_hat`` through the softmax weights; bank entries are
    constants.
    """
    if not 0.0 < kappa <= 1.0:
        raise ValueError("kappa must lie in (0, 1]")
    M, C = p_hat.shape
    if bank.occupancy == 0:
        log.debug("retrieval from an empty knowledge bank; returning zeros")
        return Tensor(np.zeros((M, C)))
    stored = bank.stored.copy()
    count = retrieval_count(kappa, bank.occupancy)
    top = top_indices(_cosine(p_hat.data, stored), count)
    select = np.zeros((M, bank.occupancy))
    np.put_along_axis(select, top, 1.0, axis=1)
    if weighting == "uniform":
        return Tensor(select / count) @ Tensor(stored)
    if weighting != "softmax":
        raise ValueError(f"unknown retrieval weighting {weighting!r}")
    sim = tn.l2_normalize(p_hat) @ Tensor(_unit(stored).T)
    return tn.masked_softmax(sim, select, axis=-1) @ Tensor(stored)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), tn.NORM_EPS)


def aggregate(f_s: Tensor, p_hat: Tensor, p_prime: Tensor, params: IktParams) -> Tensor:
    """Support tokens cross-attend to fused prototypes ``p_hat + p_prime``, with residual."""
    if f_s.ndim != 3 or p_hat.shape != p_prime.shape or p_hat.shape[1] != f_s.shape[2]:
        raise DimensionError(f"support {f_s.shape}, prototypes {p_hat.shape} / {p_prime.shape} mismatch")
    p_bar = p_hat + p_prime
    h = tn.layer_norm(f_s, params.ln_g, params.ln_b)
    return f_s + multihead(h, p_bar, params.wq, params.wk, params.wv, params.wo, params.num_heads)
