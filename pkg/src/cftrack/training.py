"""Multi-task training over synthetic sequences, plus checkpoint I/O.

Each step draws a mixed batch: positive pairs (two frames of one sequence)
drive the classification, box-regression, and matched-pair objectives;
negative pairs (targets from two different sequences) drive only the
contrastive term.  Gradients accumulate pair by pair, scaled so one AdamW
step equals the gradient of

    lambda1 * mean_pos(L_cls) + lambda2 * mean_pos(L_1) + lambda3 * mean_all(L_adapt)

Checkpoints are a binary container: magic ``CFTK``, little-endian uint32
version, uint32 manifest length, a UTF-8 manifest of ``name shape... offset``
lines (offset in floats), the float32 little-endian payload, and a trailing
CRC32 of the payload.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .cfm import MarginParams, contrastive_loss, cosine_similarity, sample_pairs
from .data import SEARCH_CONTEXT, TEMPLATE_CONTEXT, augment, box_to_crop, crop_patch, crop_transform
from .errors import (
    CheckpointChecksumError,
    CheckpointFormatError,
    CheckpointManifestError,
    CheckpointTruncatedError,
    ConfigError,
    NonFiniteLossError,
)
from .heads import LossWeights, assign_targets, smooth_l1, weighted_bce
from .model import CFTrackModel
from .optim import AdamW
from .tensor import Tensor

CHECKPOINT_MAGIC = b"CFTK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    samples_per_epoch: int = 512
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    lr_decay: float = 10.0
    milestones: tuple = (22, 27, 32, 37)  # epochs where lr drops by lr_decay
    negative_fraction: float = 0.25
    loss_weights: LossWeights = field(default_factory=LossWeights)
    margin: MarginParams = field(default_factory=MarginParams)
    jitter_fraction: float = 0.15
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.samples_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs, samples_per_epoch, and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.samples_per_epoch < self.batch_size:
            raise ConfigError("samples_per_epoch must cover at least one batch")
        if not 0.0 <= self.negative_fraction <= 1.0:
            raise ConfigError("negative_fraction must lie in [0, 1]")

    @property
    def steps_per_epoch(self) -> int:
        return self.samples_per_epoch // self.batch_size

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.epochs

    def lr_at_step(self, step: int) -> float:
        epoch = step // self.steps_per_epoch
        drops = sum(1 for m in self.milestones if epoch >= m)
        return self.learning_rate / (self.lr_decay**drops)


@dataclass(frozen=True)
class StepRecord:
    step: int
    lr: float
    l_cls: float
    l_1: float
    l_adapt: float
    total: float


def write_loss_csv(history: list[StepRecord], path: str) -> None:
    with open(path, "w") as f:
        f.write("step,lr,L_cls,L_1,L_adapt,L_total\n")
        for r in history:
            f.write(f"{r.step},{r.lr!r},{r.l_cls!r},{r.l_1!r},{r.l_adapt!r},{r.total!r}\n")


def _template_input(sequence, frame_idx: int, aug_seed: int):
    ann = sequence.annotations[frame_idx]
    patch = crop_patch(sequence.frames[frame_idx], ann.box, TEMPLATE_CONTEXT, 144)
    tf = crop_transform(ann.box, TEMPLATE_CONTEXT, 144)
    patch, _ = augment(patch, box_to_crop(ann.box, tf), aug_seed)
    return Tensor(patch)


def _search_input(sequence, frame_idx: int, jitter_fraction: float, rng, aug_seed: int):
    """Search crop centered near (not exactly on) the target, plus its crop box."""
    ann = sequence.annotations[frame_idx]
    x, y, w, h = ann.box
    side = SEARCH_CONTEXT * math.sqrt(w * h)
    dx, dy = rng.uniform(-jitter_fraction, jitter_fraction, size=2) * side
    crop_ref = (x + dx, y + dy, w, h)
    patch = crop_patch(sequence.frames[frame_idx], crop_ref, SEARCH_CONTEXT, 272)
    tf = crop_transform(crop_ref, SEARCH_CONTEXT, 272)
    gt_crop = box_to_crop(ann.box, tf)
    patch, gt_crop = augment(patch, gt_crop, aug_seed)
    return Tensor(patch), gt_crop


def _gt_window_origin(gt_crop_box) -> tuple[int, int]:
    cx = gt_crop_box[0] + gt_crop_box[2] / 2
    cy = gt_crop_box[1] + gt_crop_box[3] / 2
    i = min(max(int(cy // 16), 0), 16)
    j = min(max(int(cx // 16), 0), 16)
    span = 17 - 9
    return min(max(i - 4, 0), span), min(max(j - 4, 0), span)


def batch_losses(model: CFTrackModel, dataset, pairs, config: TrainConfig,
                 step: int, backward: bool = True):
    """Forward (and optionally backward) one batch; returns component means.

    When ``backward`` is False the summed scalar graph is returned instead of
    being consumed, so a verification harness can differentiate it whole.
    """
    w = config.loss_weights
    use_matching = w.lambda3 > 0  # baseline ablation never touches the embedder
    positives = [p for p in pairs if p.label == 1]
    n_pos = max(1, len(positives))
    n_all = len(pairs)
    cls_vals, box_vals, adapt_vals = [], [], []
    graph_total = None
    for k, pair in enumerate(pairs):
        rng = np.random.default_rng([config.seed, step, k])
        aug_a = int(rng.integers(2**32))
        aug_b = int(rng.integers(2**32))
        if pair.label == 1:
            seq_t = dataset[pair.template_ref[0]]
            template = _template_input(seq_t, pair.template_ref[1], aug_a)
            f_z = model.extract(template, "template")
            seq_s = dataset[pair.search_ref[0]]
            search, gt_crop = _search_input(
                seq_s, pair.search_ref[1], config.jitter_fraction, rng, aug_b
            )
            f_x = model.extract(search, "search")
            fused = model.fuse(f_z, f_x)
            outputs = model.predict(fused)
            assignment = assign_targets(gt_crop)
            l_cls = weighted_bce(outputs.cls_map, assignment, assignment.positive_weight)
            l_box = smooth_l1(outputs.box_map, assignment)
            pair_graph = (l_cls * w.lambda1 + l_box * w.lambda2) * (1.0 / n_pos)
            if use_matching:
                e_z = model.embed(f_z.data)
                i0, j0 = _gt_window_origin(gt_crop)
                e_x = model.embed(f_x.data.window(i0, j0, 9, 9))
                l_adapt = contrastive_loss(cosine_similarity(e_z, e_x), 1, config.margin)
                pair_graph = pair_graph + l_adapt * (w.lambda3 / n_all)
                adapt_vals.append(l_adapt.item())
            cls_vals.append(l_cls.item())
            box_vals.append(l_box.item())
        else:
            if not use_matching:
                continue
            seq_t = dataset[pair.template_ref[0]]
            template = _template_input(seq_t, pair.template_ref[1], aug_a)
            f_z = model.extract(template, "template")
            e_z = model.embed(f_z.data)
            seq_b = dataset[pair.search_ref[0]]
            other = _template_input(seq_b, pair.search_ref[1], aug_b)
            f_b = model.extract(other, "template")
            e_b = model.embed(f_b.data)
            l_adapt = contrastive_loss(cosine_similarity(e_z, e_b), 0, config.margin)
            pair_graph = l_adapt * (w.lambda3 / n_all)
            adapt_vals.append(l_adapt.item())
        if backward:
            pair_graph.backward()
        else:
            graph_total = pair_graph if graph_total is None else graph_total + pair_graph
    mean_cls = float(np.mean(cls_vals)) if cls_vals else 0.0
    mean_box = float(np.mean(box_vals)) if box_vals else 0.0
    mean_adapt = float(np.mean(adapt_vals)) if adapt_vals else 0.0
    total = w.lambda1 * mean_cls + w.lambda2 * mean_box + w.lambda3 * mean_adapt
    return mean_cls, mean_box, mean_adapt, total, graph_total


def train(model: CFTrackModel, dataset, config: TrainConfig):
    """Optimize the model in place; returns the per-step loss history."""
    config.validate()
    if config.negative_fraction > 0 and len(dataset) < 2:
        raise ConfigError("negative pairs require at least 2 sequences")
    opt = AdamW(
        model.named_parameters(),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    history: list[StepRecord] = []
    for step in range(config.total_steps):
        opt.lr = config.lr_at_step(step)
        pairs = sample_pairs(
            dataset,
            config.batch_size,
            config.negative_fraction,
            seed=config.seed + 7919 * step,
        )
        opt.zero_grad()
        mean_cls, mean_box, mean_adapt, total, _ = batch_losses(
            model, dataset, pairs, config, step, backward=True
        )
        if not math.isfinite(total):
            raise NonFiniteLossError(
                f"step {step}: non-finite loss (L_cls={mean_cls}, "
                f"L_1={mean_box}, L_adapt={mean_adapt})"
            )
        opt.step()
        history.append(StepRecord(step, opt.lr, mean_cls, mean_box, mean_adapt, total))
    return history


def verification_batch(model: CFTrackModel, dataset, config: TrainConfig, step: int = 0):
    """A deterministic 2-pair (1 positive, 1 negative) objective closure."""
    pairs = sample_pairs(dataset, batch_size=2, negative_fraction=0.5, seed=config.seed)

    def loss_fn():
        *_, graph = batch_losses(model, dataset, pairs, config, step, backward=False)
        return graph

    return loss_fn


# -- checkpoint I/O -------------------------------------------------------------------


def checkpoint(model: CFTrackModel, path: str) -> None:
    names_params = model.named_parameters()
    manifest_lines = []
    payload = bytearray()
    offset = 0
    for name, p in names_params:
        shape_txt = " ".join(str(d) for d in p.data.shape)
        manifest_lines.append(f"{name} {shape_txt} {offset}".strip())
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        payload.extend(arr.tobytes())
        offset += arr.size
    manifest = ("\n".join(manifest_lines) + "\n").encode("utf-8")
    crc = zlib.crc32(bytes(payload)) & 0xFFFFFFFF
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        f.write(bytes(payload))
        f.write(struct.pack("<I", crc))


def _parse_manifest(manifest: bytes) -> list[tuple[str, tuple, int]]:
    entries = []
    for line in manifest.decode("utf-8").splitlines():
        if not line.strip():
            continue
        tokens = line.split()
        if len(tokens) < 2:
            raise CheckpointManifestError(f"malformed manifest line: {line!r}")
        name = tokens[0]
        try:
            numbers = [int(t) for t in tokens[1:]]
        except ValueError:
            raise CheckpointManifestError(f"malformed manifest line: {line!r}") from None
        entries.append((name, tuple(numbers[:-1]), numbers[-1]))
    return entries


def restore(path: str, model: CFTrackModel | None = None) -> CFTrackModel:
    """Load a checkpoint into ``model`` (default architecture when omitted)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise CheckpointTruncatedError(f"{path}: file shorter than header")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    manifest_len = struct.unpack("<I", blob[8:12])[0]
    if len(blob) < 12 + manifest_len + 4:
        raise CheckpointTruncatedError(f"{path}: truncated manifest or payload")
    manifest = blob[12 : 12 + manifest_len]
    payload = blob[12 + manifest_len : -4]
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise CheckpointChecksumError(f"{path}: payload CRC mismatch")
    entries = _parse_manifest(manifest)
    total_floats = sum(int(np.prod(shape)) if shape else 1 for _, shape, _ in entries)
    if len(payload) != 4 * total_floats:
        raise CheckpointManifestError(
            f"{path}: payload holds {len(payload) // 4} floats, manifest declares {total_floats}"
        )
    model = model or CFTrackModel()
    params = dict(model.named_parameters())
    manifest_names = [name for name, _, _ in entries]
    if set(manifest_names) != set(params):
        missing = sorted(set(params) - set(manifest_names))
        extra = sorted(set(manifest_names) - set(params))
        detail = (f"missing {missing[0]}" if missing else f"unexpected {extra[0]}")
        raise CheckpointManifestError(f"{path}: architecture mismatch ({detail})")
    floats = np.frombuffer(payload, dtype="<f4")
    for name, shape, offset in entries:
        p = params[name]
        if tuple(p.data.shape) != shape:
            raise CheckpointManifestError(
                f"{path}: tensor {name} has shape {shape} in file, "
                f"{tuple(p.data.shape)} in model"
            )
        count = int(np.prod(shape)) if shape else 1
        if offset < 0 or offset + count > floats.size:
            raise CheckpointManifestError(f"{path}: tensor {name} offset out of range")
        p.data = floats[offset : offset + count].reshape(shape).astype(np.float32).copy()
    return model
