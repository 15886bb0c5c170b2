"""Local feature enhancement: weakly supervised attention maps, part features and the
KL regulariser that pulls part-based predictions toward the global prediction.

Only used while training; evaluation never touches these layers.
"""
from __future__ import annotations

import numpy as np

from .nn import Conv2d, Module
from .tensor import ShapeError, Tensor, clamp, log, matmul, softmax

PROB_FLOOR = 1e-8


class AttentionGenerator(Module):
    """1x1 conv C -> m followed by ReLU; one non-negative map per part."""

    def __init__(self, channels: int = 64, n_maps: int = 8, rng: np.random.Generator | None = None):
        super().__init__()
        self.n_maps = n_maps
        self.add("conv", Conv2d(channels, n_maps, kernel=1, padding=0, bias=True, rng=rng))

    def forward(self, features: Tensor) -> Tensor:
        return generate_attention(self, features)


def generate_attention(layer: AttentionGenerator, features: Tensor) -> Tensor:
    conv = layer.children["conv"]
    cin = conv.params["weight"].shape[2]
    if features.shape[-1] != cin:
        raise ShapeError(f"feature map has {features.shape[-1]} channels, attention layer expects {cin}")
    return conv(features).relu()


def part_features(features: Tensor, attention: Tensor) -> Tensor:
    """(B,H,W,C) features and (B,H,W,m) maps -> (B,m,C); row k is GAP(A_k * F)."""
    if features.shape[:3] != attention.shape[:3]:
        raise ShapeError(f"spatial mismatch: features {features.shape}, attention {attention.shape}")
    B, H, W, C = features.shape
    m = attention.shape[-1]
    a = attention.reshape(B, H * W, m).transpose(0, 2, 1)
    f = features.reshape(B, H * W, C)
    return matmul(a, f) * (1.0 / (H * W))


def attention_pooled_map(features: Tensor, attention: Tensor) -> Tensor:
    """(1/m) * sum_k A_k * F, an (B,H,W,C) map whose GAP is the mean part feature."""
    if features.shape[:3] != attention.shape[:3]:
        raise ShapeError(f"spatial mismatch: features {features.shape}, attention {attention.shape}")
    return features * attention.mean(axis=-1, keepdims=True)


def kl_regularizer(p_g, p_a: Tensor) -> Tensor:
    """sum p_g * (log p_g - log p_a) over the last axis, probabilities floored at 1e-8.

    A teacher ``p_g`` passed as an array (or a Tensor without grad) is a constant.
    """
    if not isinstance(p_a, Tensor):
        p_a = Tensor(p_a)
    if not (isinstance(p_g, Tensor) and p_g.requires_grad):
        p_g = Tensor(p_g.data if isinstance(p_g, Tensor) else np.asarray(p_g), dtype=p_a.dtype)
    if p_g.shape != p_a.shape:
        raise ShapeError(f"distribution lengths differ: {p_g.shape} vs {p_a.shape}")
    return (p_g * (log(clamp(p_g, PROB_FLOOR, None)) - log(clamp(p_a, PROB_FLOOR, None)))).sum(axis=-1)


def distributions(scores: Tensor) -> Tensor:
    """Temperature-1 softmax over class scores."""
    return softmax(scores, axis=-1)
