"""Contrastive feature matching: embeddings, adaptive-margin loss, confidence.

The embedding module maps a 9x9 block of backbone features (the template
map, or a template-sized window of the search map) to a 256-float vector
through two depthwise separable layers and global average pooling.  Template
and search inputs share the same parameters.

Matching quality is the cosine similarity of the two embeddings; its
complement D = 1 - similarity drives both the adaptive margin
m(D) = m0 + beta * exp(-gamma * D) and the pairwise training objective

    y * D^2 + (1 - y) * max(0, m(D) - D)^2

so dissimilar pairs that still look alike (small D) are pushed apart harder.
At inference the similarity multiplies the classification peak into a
presence confidence, clamped at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateEmbeddingError, SamplingError, ShapeError
from .tensor import (
    Tensor,
    depthwise_separable_conv,
    global_avg_pool,
    uniform_param,
    zeros_param,
)

EMBED_DIM = 256
EMBED_WIDTHS = (64, 128, 256)
EMBED_KERNEL = 3


@dataclass(frozen=True)
class MarginParams:
    m0: float = 1.0
    beta: float = 1.0
    gamma: float = 2.0

    def __post_init__(self):
        if self.m0 < 0 or self.beta < 0 or self.gamma <= 0:
            raise ValueError(f"invalid margin parameters {self}")


@dataclass(frozen=True)
class PairSample:
    """References into a dataset: (sequence index, frame index) per side."""

    template_ref: tuple[int, int]
    search_ref: tuple[int, int]
    label: int  # 1 same target, 0 different sequences

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"pair label must be 0 or 1, got {self.label}")
        if self.label == 1 and self.template_ref[0] != self.search_ref[0]:
            raise ValueError("positive pairs must come from one sequence")
        if self.label == 0 and self.template_ref[0] == self.search_ref[0]:
            raise ValueError("negative pairs must come from different sequences")


class EmbeddingModule:
    """Shared-parameter embedder: two DS conv layers with relu, then pooling."""

    def __init__(self, seed: int):
        rng = np.random.default_rng(seed)
        k = EMBED_KERNEL
        self.layers = []
        # Zero biases keep initial embeddings input-driven rather than
        # bias-driven, so fresh embeddings of distinct targets already differ.
        for cin, cout in zip(EMBED_WIDTHS[:-1], EMBED_WIDTHS[1:]):
            self.layers.append(
                {
                    "cin": cin,
                    "cout": cout,
                    "dw_kernel": uniform_param(rng, (cin, 1, k, k), fan_in=k * k),
                    "dw_bias": zeros_param((cin,)),
                    "pw_kernel": uniform_param(rng, (cout, cin, 1, 1), fan_in=cin),
                    "pw_bias": zeros_param((cout,)),
                }
            )

    def __call__(self, features: Tensor) -> Tensor:
        if features.data.shape != (EMBED_WIDTHS[0], 9, 9):
            raise ShapeError(
                f"embedding input must be ({EMBED_WIDTHS[0]}, 9, 9), got {features.shape}"
            )
        x = features
        for layer in self.layers:
            x = depthwise_separable_conv(
                x,
                layer["dw_kernel"],
                layer["dw_bias"],
                layer["pw_kernel"],
                layer["pw_bias"],
                stride=1,
                padding=EMBED_KERNEL // 2,
            ).relu()
        out = global_avg_pool(x)
        assert out.shape == (EMBED_DIM,), f"embedding dim invariant violated: {out.shape}"
        return out

    def named_parameters(self, prefix: str = "cfm.embed"):
        for i, layer in enumerate(self.layers):
            for key in ("dw_kernel", "dw_bias", "pw_kernel", "pw_bias"):
                yield f"{prefix}{i + 1}.{key.replace('_', '.')}", layer[key]

    def layer_table(self) -> list[dict]:
        return [
            {
                "name": f"cfm.embed{i + 1}",
                "kind": "ds",
                "cin": layer["cin"],
                "cout": layer["cout"],
                "k": EMBED_KERNEL,
                "stride": 1,
                "padding": EMBED_KERNEL // 2,
            }
            for i, layer in enumerate(self.layers)
        ]


def embed(features: Tensor, module: EmbeddingModule) -> Tensor:
    return module(features)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two embeddings, clamped into [-1, 1]."""
    if a.data.shape != b.data.shape or a.data.ndim != 1:
        raise ShapeError(f"cosine_similarity: incompatible shapes {a.shape} vs {b.shape}")
    norm_a = float(np.linalg.norm(a.data))
    norm_b = float(np.linalg.norm(b.data))
    if norm_a <= 1e-12 or norm_b <= 1e-12:
        raise DegenerateEmbeddingError(
            f"zero-norm embedding (|a|={norm_a:.2e}, |b|={norm_b:.2e})"
        )
    dot = (a * b).sum()
    na = (a * a).sum().sqrt()
    nb = (b * b).sum().sqrt()
    sim = dot / (na * nb)
    # Rounding can push |sim| past 1 by ~1e-7; clamp keeps D = 1 - sim in [0, 2].
    sim = sim.clamp_min(-1.0)
    return -((-sim).clamp_min(-1.0))


def adaptive_margin(distance: float, params: MarginParams) -> float:
    """m(D) = m0 + beta * exp(-gamma * D); decreasing in D."""
    return params.m0 + params.beta * math.exp(-params.gamma * distance)


def adaptive_contrastive_loss(distance: float, y: int, params: MarginParams) -> float:
    if y == 1:
        return distance * distance
    hinge = max(0.0, adaptive_margin(distance, params) - distance)
    return hinge * hinge


def contrastive_loss(similarity: Tensor, y: int, params: MarginParams) -> Tensor:
    """Differentiable pair loss; the margin's dependence on D is part of the graph."""
    distance = 1.0 - similarity
    if y == 1:
        return distance.square()
    margin = (distance * (-params.gamma)).exp() * params.beta + params.m0
    return (margin - distance).relu().square()


def confidence(similarity: float, score: float) -> float:
    """max(similarity * score, 0): zero whenever similarity is non-positive."""
    return max(similarity * score, 0.0)


@dataclass(frozen=True)
class CfmAssessment:
    """Per-frame matching verdict."""

    similarity: float
    distance: float
    margin: float
    score: float
    confidence: float

    def __post_init__(self):
        if not -1.0 <= self.similarity <= 1.0:
            raise ValueError(f"similarity out of range: {self.similarity}")
        if self.distance != 1.0 - self.similarity:
            raise ValueError("distance must equal 1 - similarity exactly")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score out of range: {self.score}")
        if self.confidence != max(self.similarity * self.score, 0.0):
            raise ValueError("confidence must equal max(similarity * score, 0)")


def assess(similarity: float, score: float, params: MarginParams) -> CfmAssessment:
    distance = 1.0 - similarity
    return CfmAssessment(
        similarity=similarity,
        distance=distance,
        margin=adaptive_margin(distance, params),
        score=score,
        confidence=confidence(similarity, score),
    )


def sample_pairs(dataset, batch_size: int, negative_fraction: float, seed: int) -> list[PairSample]:
    """Deterministically draw training pairs from a list of sequences.

    Positive pairs take two distinct annotated frames of one sequence;
    negative pairs take annotated frames of two different sequences.  Frames
    without a box (absent target) are never sampled.
    """
    if not 0.0 <= negative_fraction <= 1.0:
        raise SamplingError(f"negative_fraction must be in [0, 1], got {negative_fraction}")
    n_neg = round(batch_size * negative_fraction)
    n_pos = batch_size - n_neg
    usable = [
        (si, [fi for fi, ann in enumerate(seq.annotations) if ann.has_box])
        for si, seq in enumerate(dataset)
    ]
    pos_pool = [(si, frames) for si, frames in usable if len(frames) >= 2]
    neg_pool = [(si, frames) for si, frames in usable if len(frames) >= 1]
    if n_pos > 0 and not pos_pool:
        raise SamplingError("no sequence has two annotated frames for positive pairs")
    if n_neg > 0 and len(neg_pool) < 2:
        raise SamplingError("negative pairs require at least 2 sequences with annotations")
    rng = np.random.default_rng(seed)
    pairs: list[PairSample] = []
    for _ in range(n_pos):
        si, frames = pos_pool[rng.integers(len(pos_pool))]
        fa, fb = rng.choice(len(frames), size=2, replace=False)
        pairs.append(PairSample((si, frames[fa]), (si, frames[fb]), label=1))
    for _ in range(n_neg):
        ia, ib = rng.choice(len(neg_pool), size=2, replace=False)
        sa, fa_frames = neg_pool[ia]
        sb, fb_frames = neg_pool[ib]
        pairs.append(
            PairSample(
                (sa, fa_frames[rng.integers(len(fa_frames))]),
                (sb, fb_frames[rng.integers(len(fb_frames))]),
                label=0,
            )
        )
    return pairs
