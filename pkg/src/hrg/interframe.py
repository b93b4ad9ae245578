"""Per-video temporal transformer over T frame tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .attention import init_linear, multihead
from .tensor import DimensionError, Tensor


def sinusoidal_positions(T: int, C: int, scale: float = 1.0) -> np.ndarray:
    """Sinusoidal encodings rescaled so every row has norm ``scale``."""
    pos = np.arange(T)[:, None]
    idx = np.arange(C)[None, :]
    angle = pos / np.power(10000.0, (2 * (idx // 2)) / C)
    pe = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    return scale * pe / np.linalg.norm(pe, axis=1, keepdims=True)


@dataclass
class TemporalEncoderParams:
    layers: list      # one dict of Tensors per block
    num_heads: int
    pos_scale: float = 0.1

    @classmethod
    def init(cls, rng, C: int, num_layers: int = 1, num_heads: int = 2, hidden: int | None = None,
             pos_scale: float = 0.1):
        if C % num_heads:
            raise DimensionError(f"C={C} not divisible by num_heads={num_heads}")
        hidden = hidden or 2 * C
        layers = []
        for _ in range(num_layers):
            layers.append({
                "ln1_g": Tensor(np.ones(C), requires_grad=True),
                "ln1_b": Tensor(np.zeros(C), requires_grad=True),
                "wq": init_linear(rng, C, C), "wk": init_linear(rng, C, C),
                "wv": init_linear(rng, C, C), "wo": init_linear(rng, C, C),
                "ln2_g": Tensor(np.ones(C), requires_grad=True),
                "ln2_b": Tensor(np.zeros(C), requires_grad=True),
                "w1": init_linear(rng, C, hidden), "b1": Tensor(np.zeros(hidden), requires_grad=True),
                "w2": init_linear(rng, hidden, C), "b2": Tensor(np.zeros(C), requires_grad=True),
            })
        return cls(layers, num_heads, pos_scale)

    def named(self, prefix: str = "frame") -> dict:
        return {f"{prefix}.{i}.{k}": v for i, layer in enumerate(self.layers) for k, v in layer.items()}


def temporal_encode(x: Tensor, params: TemporalEncoderParams) -> Tensor:
    """Encode (B, T, C) videos independently with pre-norm transformer blocks."""
    if x.ndim != 3:
        raise DimensionError(f"temporal_encode expects (B, T, C), got {x.shape}")
    B, T, C = x.shape
    if params.layers and params.layers[0]["wq"].shape[0] != C:
        raise DimensionError(f"input width {C} does not match encoder width {params.layers[0]['wq'].shape[0]}")
    h = x + sinusoidal_positions(T, C, params.pos_scale)
    for p in params.layers:
        a = tn.layer_norm(h, p["ln1_g"], p["ln1_b"])
        h = h + multihead(a, a, p["wq"], p["wk"], p["wv"], p["wo"], params.num_heads)
        f = tn.layer_norm(h, p["ln2_g"], p["ln2_b"])
        h = h + (tn.gelu(f @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"])
    return h
