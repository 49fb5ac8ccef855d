"""Anchor-free prediction heads and the composite training loss.

Both branches run the fused 81-channel map through two 3x3 and one 5x5
depthwise separable convolutions.  Each spatial cell predicts a sigmoid
presence score and relu'd (l, t, r, b) edge offsets in feature-stride
units.  Target assignment marks cells whose image-space center falls in
the central half of the ground-truth box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteLossError, ShapeError
from .tensor import Tensor, depthwise_separable_conv, uniform_param

MAP_SIZE = 17
STRIDE = 16
HEAD_WIDTH = 96
SHRINK = 0.5


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0  # classification
    lambda2: float = 1.0  # box regression
    lambda3: float = 2.0  # contrastive matching

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda3 < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


@dataclass
class HeadOutputs:
    cls_map: Tensor  # (1, 17, 17), sigmoid scores
    box_map: Tensor  # (4, 17, 17), relu'd (l, t, r, b) offsets


@dataclass
class TargetAssignment:
    labels: np.ndarray  # (17, 17) bool, True = positive cell
    targets: np.ndarray  # (4, 17, 17) float32, valid where positive
    positive_count: int
    target_present: bool

    @property
    def positive_weight(self) -> float:
        negatives = self.labels.size - self.positive_count
        return negatives / max(1, self.positive_count)


class _DSLayer:
    def __init__(self, rng, cin, cout, k):
        self.cin, self.cout, self.k = cin, cout, k
        self.padding = k // 2
        self.dw_kernel = uniform_param(rng, (cin, 1, k, k), fan_in=k * k)
        self.dw_bias = uniform_param(rng, (cin,), fan_in=k * k)
        self.pw_kernel = uniform_param(rng, (cout, cin, 1, 1), fan_in=cin)
        self.pw_bias = uniform_param(rng, (cout,), fan_in=cin)

    def __call__(self, x):
        return depthwise_separable_conv(
            x, self.dw_kernel, self.dw_bias, self.pw_kernel, self.pw_bias,
            stride=1, padding=self.padding,
        )

    def named_parameters(self, prefix):
        yield f"{prefix}.dw.kernel", self.dw_kernel
        yield f"{prefix}.dw.bias", self.dw_bias
        yield f"{prefix}.pw.kernel", self.pw_kernel
        yield f"{prefix}.pw.bias", self.pw_bias


class _Branch:
    """Two 3x3 layers then one 5x5 layer: 81 -> 96 -> 96 -> out."""

    def __init__(self, rng, out_channels):
        self.layers = [
            _DSLayer(rng, 81, HEAD_WIDTH, 3),
            _DSLayer(rng, HEAD_WIDTH, HEAD_WIDTH, 3),
            _DSLayer(rng, HEAD_WIDTH, out_channels, 5),
        ]

    def __call__(self, x):
        x = self.layers[0](x).relu()
        x = self.layers[1](x).relu()
        return self.layers[2](x)

    def named_parameters(self, prefix):
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.l{i + 1}")

    def layer_table(self, prefix):
        return [
            {"name": f"{prefix}.l{i + 1}", "kind": "ds", "cin": l.cin,
             "cout": l.cout, "k": l.k, "stride": 1, "padding": l.padding}
            for i, l in enumerate(self.layers)
        ]


class PredictionHeads:
    def __init__(self, seed: int):
        rng = np.random.default_rng(seed)
        self.cls_branch = _Branch(rng, 1)
        self.box_branch = _Branch(rng, 4)

    def __call__(self, fused: Tensor) -> HeadOutputs:
        if fused.data.shape != (81, MAP_SIZE, MAP_SIZE):
            raise ShapeError(f"heads expect (81, 17, 17) fused map, got {fused.shape}")
        cls_map = self.cls_branch(fused).sigmoid()
        box_map = self.box_branch(fused).relu()
        return HeadOutputs(cls_map=cls_map, box_map=box_map)

    def named_parameters(self):
        yield from self.cls_branch.named_parameters("head.cls")
        yield from self.box_branch.named_parameters("head.box")

    def layer_table(self):
        return self.cls_branch.layer_table("head.cls") + self.box_branch.layer_table("head.box")


def run_heads(fused: Tensor, heads: PredictionHeads) -> HeadOutputs:
    return heads(fused)


def cell_centers(map_size: int = MAP_SIZE, stride: int = STRIDE) -> tuple[np.ndarray, np.ndarray]:
    """Image-space (x, y) centers of every cell, each (map_size, map_size)."""
    coords = (np.arange(map_size) + 0.5) * stride
    cx = np.broadcast_to(coords[None, :], (map_size, map_size))
    cy = np.broadcast_to(coords[:, None], (map_size, map_size))
    return cx, cy


def assign_targets(gt_box, crop_size: int = MAP_SIZE * STRIDE, stride: int = STRIDE) -> TargetAssignment:
    """Label cells and build (l, t, r, b) regression targets in stride units.

    ``gt_box`` is (x, y, w, h) in search-crop pixels, or None for an absent
    target.  Positive cells are those whose center lies inside the box
    shrunk by half about its own center.
    """
    map_size = crop_size // stride
    labels = np.zeros((map_size, map_size), dtype=bool)
    targets = np.zeros((4, map_size, map_size), dtype=np.float32)
    if gt_box is None:
        return TargetAssignment(labels, targets, 0, target_present=False)
    x, y, w, h = (float(v) for v in gt_box)
    if w <= 0 or h <= 0:
        return TargetAssignment(labels, targets, 0, target_present=False)
    x2, y2 = x + w, y + h
    if x2 <= 0 or y2 <= 0 or x >= crop_size or y >= crop_size:
        return TargetAssignment(labels, targets, 0, target_present=False)
    cx, cy = cell_centers(map_size, stride)
    sx1 = x + w * (1 - SHRINK) / 2
    sx2 = x2 - w * (1 - SHRINK) / 2
    sy1 = y + h * (1 - SHRINK) / 2
    sy2 = y2 - h * (1 - SHRINK) / 2
    labels = (cx >= sx1) & (cx < sx2) & (cy >= sy1) & (cy < sy2)
    targets[0] = (cx - x) / stride
    targets[1] = (cy - y) / stride
    targets[2] = (x2 - cx) / stride
    targets[3] = (y2 - cy) / stride
    targets *= labels[None, :, :]
    return TargetAssignment(labels, targets, int(labels.sum()), target_present=True)


def decode_box(box_map, cell: tuple[int, int], stride: int = STRIDE) -> tuple[float, float, float, float]:
    """Invert the assignment at one cell: offsets back to an (x, y, w, h) box."""
    data = box_map.data if isinstance(box_map, Tensor) else np.asarray(box_map)
    i, j = cell
    l, t, r, b = (float(v) for v in data[:, i, j])
    cx = (j + 0.5) * stride
    cy = (i + 0.5) * stride
    return (cx - l * stride, cy - t * stride, (l + r) * stride, (t + b) * stride)


def box_is_valid(box) -> bool:
    return box is not None and box[2] > 0 and box[3] > 0


def weighted_bce(cls_map: Tensor, assignment: TargetAssignment, positive_weight: float) -> Tensor:
    """-(1/N) sum[w_p t log p + (1 - t) log(1 - p)], logs clamped at 1e-12."""
    n = assignment.labels.size
    pos = assignment.labels.astype(cls_map.data.dtype)[None, :, :]
    log_p = cls_map.clamp_min(1e-12).log()
    log_not_p = (1.0 - cls_map).clamp_min(1e-12).log()
    pos_term = (log_p * Tensor(positive_weight * pos)).sum()
    neg_term = (log_not_p * Tensor(1.0 - pos)).sum()
    return (pos_term + neg_term) * (-1.0 / n)


def smooth_l1(box_map: Tensor, assignment: TargetAssignment) -> Tensor:
    """Mean smooth-L1 over positive cells and 4 offsets; 0 with no positives."""
    if assignment.positive_count == 0:
        return Tensor(np.zeros((), dtype=box_map.data.dtype))
    mask = np.broadcast_to(
        assignment.labels[None, :, :], box_map.data.shape
    ).astype(box_map.data.dtype)
    diff = box_map - Tensor(assignment.targets.astype(box_map.data.dtype))
    per_elem = diff.smooth_l1() * Tensor(mask)
    return per_elem.sum() * (1.0 / (4 * assignment.positive_count))


def total_loss(l_cls, l_box, l_adapt, weights: LossWeights) -> Tensor:
    """Weighted sum of the three components; rejects non-finite inputs."""
    parts = {"L_cls": l_cls, "L_1": l_box, "L_adapt": l_adapt}
    for name, part in parts.items():
        value = part.data.item() if isinstance(part, Tensor) else float(part)
        if not np.isfinite(value):
            raise NonFiniteLossError(f"loss component {name} is non-finite: {value}")
    terms = []
    for weight, part in (
        (weights.lambda1, l_cls),
        (weights.lambda2, l_box),
        (weights.lambda3, l_adapt),
    ):
        if not isinstance(part, Tensor):
            part = Tensor(np.asarray(part, dtype=np.float32))
        terms.append(part * weight)
    return terms[0] + terms[1] + terms[2]
