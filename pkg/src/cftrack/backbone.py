"""Shared-weight Siamese feature extractor.

A four-stage stack (a regular stem convolution followed by three depthwise
separable blocks) with cumulative stride 16.  One parameter set serves both
the template branch and the search branch; the branches differ only in the
input size they accept (144 -> 9x9 features, 272 -> 17x17 features).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    conv2d,
    depthwise_separable_conv,
    uniform_param,
)

TEMPLATE = "template"
SEARCH = "search"


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple = (16, 24, 32, 64)
    kernel_size: int = 3
    strides: tuple = (2, 2, 2, 2)
    in_channels: int = 3
    template_size: int = 144
    search_size: int = 272

    def validate(self) -> None:
        if len(self.widths) != len(self.strides):
            raise ConfigError("backbone widths and strides must have equal length")
        if self.kernel_size % 2 != 1:
            raise ConfigError("backbone kernel size must be odd")
        total = math.prod(self.strides)
        if total != 16:
            raise ConfigError(f"backbone strides must multiply to 16, got {total}")
        if self.output_size(self.template_size) != 9:
            raise ConfigError("template input must map to a 9x9 feature map")
        if self.output_size(self.search_size) != 17:
            raise ConfigError("search input must map to a 17x17 feature map")

    def output_size(self, n: int) -> int:
        k = self.kernel_size
        pad = k // 2
        for s in self.strides:
            n = (n + 2 * pad - k) // s + 1
        return n

    @property
    def out_channels(self) -> int:
        return self.widths[-1]

    def input_size(self, role: str) -> int:
        if role == TEMPLATE:
            return self.template_size
        if role == SEARCH:
            return self.search_size
        raise ValueError(f"unknown role {role!r}")


@dataclass
class FeatureMap:
    """Backbone output tagged with the branch that produced it."""

    role: str
    data: Tensor

    def __post_init__(self):
        c, h, w = self.data.shape
        expected = {TEMPLATE: 9, SEARCH: 17}.get(self.role)
        if expected is None:
            raise ValueError(f"unknown feature-map role {self.role!r}")
        if h != expected or w != expected:
            raise ShapeError(
                f"{self.role} feature map must be {expected}x{expected}, got {h}x{w}"
            )


class _DSBlock:
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int):
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.padding = k // 2
        self.dw_kernel = uniform_param(rng, (cin, 1, k, k), fan_in=k * k)
        self.dw_bias = uniform_param(rng, (cin,), fan_in=k * k)
        self.pw_kernel = uniform_param(rng, (cout, cin, 1, 1), fan_in=cin)
        self.pw_bias = uniform_param(rng, (cout,), fan_in=cin)

    def __call__(self, x: Tensor) -> Tensor:
        return depthwise_separable_conv(
            x, self.dw_kernel, self.dw_bias, self.pw_kernel, self.pw_bias,
            stride=self.stride, padding=self.padding,
        ).relu()

    def named_parameters(self, prefix: str):
        yield f"{prefix}.dw.kernel", self.dw_kernel
        yield f"{prefix}.dw.bias", self.dw_bias
        yield f"{prefix}.pw.kernel", self.pw_kernel
        yield f"{prefix}.pw.bias", self.pw_bias


class Backbone:
    """Stem conv plus three depthwise separable blocks, stride 16 overall."""

    def __init__(self, config: BackboneConfig, seed: int):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        k = config.kernel_size
        w0 = config.widths[0]
        self.stem_kernel = uniform_param(
            rng, (w0, config.in_channels, k, k), fan_in=config.in_channels * k * k
        )
        self.stem_bias = uniform_param(rng, (w0,), fan_in=config.in_channels * k * k)
        self.blocks = [
            _DSBlock(rng, config.widths[i], config.widths[i + 1], k, config.strides[i + 1])
            for i in range(len(config.widths) - 1)
        ]

    def named_parameters(self):
        yield "backbone.stem.kernel", self.stem_kernel
        yield "backbone.stem.bias", self.stem_bias
        for i, blk in enumerate(self.blocks):
            yield from blk.named_parameters(f"backbone.block{i + 1}")

    def features(self, image: Tensor, role: str, _skip_size_check: bool = False) -> FeatureMap:
        """Run one branch.  ``image`` is CHW with pixels in [0, 1]."""
        if image.data.ndim != 3 or image.data.shape[0] != self.config.in_channels:
            raise ShapeError(f"backbone expects CHW image with 3 channels, got {image.shape}")
        expected = self.config.input_size(role)
        c, h, w = image.data.shape
        if not _skip_size_check and (h != expected or w != expected):
            raise ShapeError(
                f"{role} branch expects {expected}x{expected} input, got {h}x{w}"
            )
        if image.data.size and (image.data.min() < -1e-6 or image.data.max() > 1.0 + 1e-6):
            raise ValueError("backbone input pixels must be normalized to [0, 1]")
        pad = self.config.kernel_size // 2
        x = conv2d(image, self.stem_kernel, self.stem_bias,
                   stride=self.config.strides[0], padding=pad).relu()
        for blk in self.blocks:
            x = blk(x)
        if _skip_size_check:
            return x  # raw tensor for test hooks; no role invariant to enforce
        return FeatureMap(role=role, data=x)

    def layer_table(self) -> list[dict]:
        """Static description used for parameter/MAC accounting."""
        cfg = self.config
        rows = [
            {
                "name": "backbone.stem",
                "kind": "conv",
                "cin": cfg.in_channels,
                "cout": cfg.widths[0],
                "k": cfg.kernel_size,
                "stride": cfg.strides[0],
                "padding": cfg.kernel_size // 2,
            }
        ]
        for i, blk in enumerate(self.blocks):
            rows.append(
                {
                    "name": f"backbone.block{i + 1}",
                    "kind": "ds",
                    "cin": blk.cin,
                    "cout": blk.cout,
                    "k": blk.k,
                    "stride": blk.stride,
                    "padding": blk.padding,
                }
            )
        return rows


def build_backbone(config: BackboneConfig, seed: int) -> Backbone:
    return Backbone(config, seed)


def extract_features(image: Tensor, backbone: Backbone, role: str) -> FeatureMap:
    return backbone.features(image, role)
