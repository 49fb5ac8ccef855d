"""Online tracking loop: template init, per-frame search, confidence gating.

The template is extracted once (init/reinit only) and never updated.  Each
frame crops a search region around the last confident box, decodes the best
cell's box, and gates presence on the matching confidence.  When gating
fails, the reported box is the retained last confident box and the search
region stays put.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .cfm import MarginParams, confidence as cfm_confidence, cosine_similarity
from .data import (
    SEARCH_CONTEXT,
    TEMPLATE_CONTEXT,
    box_from_crop,
    crop_patch,
    crop_transform,
)
from .errors import DegenerateBoxError, ShapeError
from .heads import MAP_SIZE, STRIDE, box_is_valid, decode_box
from .model import CFTrackModel
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class TrackerConfig:
    presence_threshold: float = 0.8
    use_cfm: bool = True
    template_context: float = TEMPLATE_CONTEXT
    search_context: float = SEARCH_CONTEXT
    margin: MarginParams = MarginParams()

    def __post_init__(self):
        if not 0.0 <= self.presence_threshold <= 1.0:
            raise ValueError(f"presence threshold out of range: {self.presence_threshold}")


@dataclass(frozen=True)
class TrackResult:
    frame_index: int
    box: tuple | None  # (x, y, w, h) in frame pixels
    score: float
    confidence: float
    present: bool


@dataclass
class TrackState:
    template_features: object  # FeatureMap, fixed between (re)inits
    template_embedding: Tensor
    last_box: tuple
    last_confidence: float
    present: bool
    frame_index: int
    frame_size: tuple


def _to_image_tensor(patch: np.ndarray) -> Tensor:
    return Tensor(patch)


def init(frame: np.ndarray, box, model: CFTrackModel, config: TrackerConfig,
         frame_index: int = 0) -> TrackState:
    x, y, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise DegenerateBoxError(f"cannot initialize from degenerate box {box}")
    H, W = frame.shape[:2]
    if x + w <= 0 or y + h <= 0 or x >= W or y >= H:
        raise DegenerateBoxError(f"init box {box} lies outside the {W}x{H} frame")
    with no_grad():
        patch = crop_patch(frame, (x, y, w, h), config.template_context, 144)
        features = model.extract(_to_image_tensor(patch), "template")
        embedding = model.embed(features.data)
    return TrackState(
        template_features=features,
        template_embedding=embedding,
        last_box=(x, y, w, h),
        last_confidence=1.0,
        present=True,
        frame_index=frame_index,
        frame_size=(H, W),
    )


def reinit(state: TrackState, frame: np.ndarray, gt_box, model: CFTrackModel,
           config: TrackerConfig) -> TrackState:
    """Re-template from ground truth; equivalent to init at this frame.

    ``frame_index`` still names the last *emitted* result, so a track_frame
    call on this same frame lands on the right index.
    """
    return init(frame, gt_box, model, config, frame_index=state.frame_index)


def _embedding_window_origin(cell: tuple[int, int]) -> tuple[int, int]:
    i, j = cell
    span = MAP_SIZE - 9
    return min(max(i - 4, 0), span), min(max(j - 4, 0), span)


def track_frame(state: TrackState, frame: np.ndarray, model: CFTrackModel,
                config: TrackerConfig) -> tuple[TrackState, TrackResult]:
    H, W = frame.shape[:2]
    if (H, W) != state.frame_size:
        raise ShapeError(
            f"frame size {W}x{H} does not match init frame "
            f"{state.frame_size[1]}x{state.frame_size[0]}"
        )
    with no_grad():
        transform = crop_transform(state.last_box, config.search_context, 272)
        patch = crop_patch(frame, state.last_box, config.search_context, 272)
        f_x = model.extract(_to_image_tensor(patch), "search")
        fused = model.fuse(state.template_features, f_x)
        outputs = model.predict(fused)
        cls = outputs.cls_map.data[0]
        flat_idx = int(np.argmax(cls))  # row-major: lowest index wins ties
        cell = (flat_idx // MAP_SIZE, flat_idx % MAP_SIZE)
        score = float(cls[cell])
        crop_box = decode_box(outputs.box_map, cell, STRIDE)
        frame_box = box_from_crop(crop_box, transform)
        if config.use_cfm:
            i0, j0 = _embedding_window_origin(cell)
            window = f_x.data.window(i0, j0, 9, 9)
            emb = model.embed(window)
            similarity = cosine_similarity(state.template_embedding, emb).item()
            conf = cfm_confidence(similarity, score)
        else:
            conf = score  # matching disabled: similarity treated as 1

    present = conf >= config.presence_threshold and box_is_valid(frame_box)
    new_index = state.frame_index + 1
    if present:
        new_state = replace(
            state,
            last_box=tuple(frame_box),
            last_confidence=conf,
            present=True,
            frame_index=new_index,
        )
        result = TrackResult(new_index, tuple(frame_box), score, conf, True)
    else:
        new_state = replace(
            state, last_confidence=conf, present=False, frame_index=new_index
        )
        result = TrackResult(new_index, state.last_box, score, conf, False)
    return new_state, result


class SiameseTracker:
    """Stateful wrapper exposing the init/track/reinit protocol."""

    def __init__(self, model: CFTrackModel, config: TrackerConfig | None = None):
        self.model = model
        self.config = config or TrackerConfig()
        self.state: TrackState | None = None

    def init(self, frame, box, frame_index: int = 0) -> None:
        self.state = init(frame, box, self.model, self.config, frame_index)

    def track(self, frame) -> TrackResult:
        if self.state is None:
            raise RuntimeError("tracker used before init")
        self.state, result = track_frame(self.state, frame, self.model, self.config)
        return result

    def reinit(self, frame, gt_box) -> None:
        if self.state is None:
            raise RuntimeError("tracker used before init")
        self.state = reinit(self.state, frame, gt_box, self.model, self.config)


# -- results file I/O -----------------------------------------------------------


def write_results(results: list[TrackResult], path: str) -> None:
    """One line per frame: frame_idx,x,y,w,h,score,confidence,present."""
    with open(path, "w") as f:
        for r in results:
            if r.box is None:
                box_txt = "NaN,NaN,NaN,NaN"
            else:
                box_txt = ",".join(repr(float(v)) for v in r.box)
            f.write(
                f"{r.frame_index},{box_txt},{float(r.score)!r},"
                f"{float(r.confidence)!r},{1 if r.present else 0}\n"
            )


def read_results(path: str) -> list[TrackResult]:
    results = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            tok = line.split(",")
            box_vals = [float(v) for v in tok[1:5]]
            box = None if any(math.isnan(v) for v in box_vals) else tuple(box_vals)
            results.append(
                TrackResult(
                    frame_index=int(tok[0]),
                    box=box,
                    score=float(tok[5]),
                    confidence=float(tok[6]),
                    present=tok[7] == "1",
                )
            )
    return results
