"""Feature fusion: pixel-wise correlation followed by channel attention.

Each of the 81 template positions correlates (as a 1x1 filter, summed over
channels) with the search feature map, giving an 81-channel map at the
search resolution.  A squeeze-style two-layer gate then rescales channels;
sigmoid gates keep every multiplier inside (0, 1).
"""

from __future__ import annotations

import numpy as np

from .backbone import FeatureMap
from .errors import ShapeError
from .tensor import (
    Tensor,
    fully_connected,
    global_avg_pool,
    pixelwise_correlation,
    scale_channels,
    uniform_param,
    zeros_param,
)

FUSED_CHANNELS = 81
FUSED_SIZE = 17
ATTENTION_HIDDEN = 20


class AttentionMLP:
    """Two dense layers gating the fused channels: sigmoid(W2 relu(W1 v + b1) + b2)."""

    def __init__(self, rng: np.random.Generator, channels: int = FUSED_CHANNELS,
                 hidden: int = ATTENTION_HIDDEN):
        self.channels = channels
        self.hidden = hidden
        self.w1 = uniform_param(rng, (hidden, channels), fan_in=channels)
        self.b1 = uniform_param(rng, (hidden,), fan_in=channels)
        self.w2 = uniform_param(rng, (channels, hidden), fan_in=hidden)
        # Zero final bias so untrained gates start near 0.5.
        self.b2 = zeros_param((channels,))

    def gates(self, pooled: Tensor) -> Tensor:
        h = fully_connected(pooled, self.w1, self.b1).relu()
        return fully_connected(h, self.w2, self.b2).sigmoid()

    def named_parameters(self, prefix: str = "fusion.attn"):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


def channel_attention(fused: Tensor, mlp: AttentionMLP) -> Tensor:
    if fused.data.ndim != 3 or fused.data.shape[0] != mlp.channels:
        raise ShapeError(
            f"channel_attention expects {mlp.channels}-channel CHW input, got {fused.shape}"
        )
    pooled = global_avg_pool(fused)
    return scale_channels(fused, mlp.gates(pooled))


class FusionModule:
    def __init__(self, seed: int, channels: int = FUSED_CHANNELS, hidden: int = ATTENTION_HIDDEN):
        self.channels = channels
        self.mlp = AttentionMLP(np.random.default_rng(seed), channels, hidden)

    def fuse(self, f_z: FeatureMap, f_x: FeatureMap) -> Tensor:
        """Correlate template against search features, then gate channels."""
        if f_z.role != "template" or f_x.role != "search":
            raise ValueError("fuse expects (template, search) feature maps")
        corr = pixelwise_correlation(f_z.data, f_x.data)
        out = channel_attention(corr, self.mlp)
        assert out.shape == (FUSED_CHANNELS, FUSED_SIZE, FUSED_SIZE), (
            f"fused map invariant violated: {out.shape}"
        )
        return out

    def named_parameters(self):
        yield from self.mlp.named_parameters()

    def layer_table(self) -> list[dict]:
        return [
            {"name": "fusion.corr", "kind": "pixelwise-corr", "cin": 64,
             "cout": self.channels, "k": 1, "stride": 1, "padding": 0},
            {"name": "fusion.attn.fc1", "kind": "fc", "cin": self.channels,
             "cout": self.mlp.hidden, "k": 1, "stride": 1, "padding": 0},
            {"name": "fusion.attn.fc2", "kind": "fc", "cin": self.mlp.hidden,
             "cout": self.channels, "k": 1, "stride": 1, "padding": 0},
            {"name": "fusion.gate", "kind": "gate", "cin": self.channels,
             "cout": self.channels, "k": 1, "stride": 1, "padding": 0},
        ]
