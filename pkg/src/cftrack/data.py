"""Synthetic tracking sequences with exact-geometry visibility labels.

Each sequence renders a bright target (rectangle or ellipse), a few
similar-looking distractors, an optional occluder sweep across the target,
and an optional scripted exit through the nearest frame edge.  Visibility
labels come from exact rectangle arithmetic, never from the renderer:

    AB  target center outside the frame (box undefined)
    FO  occluder covers >= 95% of the box area
    PO  occluder covers >= 20%
    FC  >= 10% of the box area lies outside the frame, center still inside
    CL  otherwise

Frames are 8-bit RGB so that PPM round trips are bit-exact.
"""

from __future__ import annotations

import colorsys
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import AnnotationParseError, ConfigError, DegenerateBoxError

VISIBILITY_CLASSES = ("CL", "PO", "FO", "FC", "AB")

TEMPLATE_CONTEXT = 2.0
SEARCH_CONTEXT = 2.0 * 272.0 / 144.0

PO_THRESHOLD = 0.20
FO_THRESHOLD = 0.95
FC_THRESHOLD = 0.10


@dataclass(frozen=True)
class FrameAnnotation:
    box: tuple | None  # (x, y, w, h) in frame pixels; None when absent
    visibility: str

    def __post_init__(self):
        if self.visibility not in VISIBILITY_CLASSES:
            raise AnnotationParseError(f"unknown visibility token {self.visibility!r}")
        if self.visibility == "AB":
            if self.box is not None:
                raise AnnotationParseError("absent frames carry no box")
        else:
            if self.box is None or self.box[2] <= 0 or self.box[3] <= 0:
                raise AnnotationParseError(
                    f"visible frames need a positive-size box, got {self.box}"
                )

    @property
    def has_box(self) -> bool:
        return self.box is not None


@dataclass(frozen=True)
class SyntheticSceneConfig:
    seed: int = 0
    length: int = 40
    frame_size: int = 384
    num_distractors: int = 2
    motion_noise: float = 1.5
    target_size_range: tuple = (44.0, 68.0)
    occluder_enabled: bool = True
    occluder_scale: float = 1.8
    exit_enabled: bool = False

    def validate(self) -> None:
        if self.length < 2:
            raise ConfigError("sequence length must be at least 2")
        if self.frame_size < 272:
            raise ConfigError("frame size must accommodate search crops (>= 272)")
        if self.occluder_enabled and self.length < 20:
            raise ConfigError("occluder events need length >= 20")
        if self.exit_enabled and self.length < 32:
            raise ConfigError("exit events need length >= 32")
        obj_side = self.target_size_range[1] + 24
        if (self.num_distractors + 1) * obj_side**2 > 0.5 * self.frame_size**2:
            raise ConfigError(
                f"{self.num_distractors} distractors do not fit a "
                f"{self.frame_size}px frame"
            )
        if not 0 < self.target_size_range[0] <= self.target_size_range[1]:
            raise ConfigError(f"bad target size range {self.target_size_range}")


@dataclass
class Sequence:
    seq_id: str
    frames: list  # uint8 (H, W, 3) arrays
    annotations: list  # FrameAnnotation per frame
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.frames) != len(self.annotations):
            raise ValueError("frames and annotations must have equal length")

    def __len__(self):
        return len(self.frames)


def sequences_equal(a: Sequence, b: Sequence) -> bool:
    if len(a) != len(b) or a.annotations != b.annotations:
        return False
    return all(np.array_equal(fa, fb) for fa, fb in zip(a.frames, b.frames))


# -- exact box geometry ---------------------------------------------------------


def rect_intersection_area(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    return max(0.0, iw) * max(0.0, ih)


def occluded_fraction(target_box, occluder_box) -> float:
    area = target_box[2] * target_box[3]
    if area <= 0:
        return 0.0
    return rect_intersection_area(target_box, occluder_box) / area


def outside_fraction(box, frame_size: int) -> float:
    area = box[2] * box[3]
    if area <= 0:
        return 1.0
    inside = rect_intersection_area(box, (0.0, 0.0, float(frame_size), float(frame_size)))
    return 1.0 - inside / area


def classify_visibility(box, occluder_box, frame_size: int) -> str:
    cx = box[0] + box[2] / 2
    cy = box[1] + box[3] / 2
    if not (0 <= cx < frame_size and 0 <= cy < frame_size):
        return "AB"
    occ = occluded_fraction(box, occluder_box) if occluder_box is not None else 0.0
    if occ >= FO_THRESHOLD:
        return "FO"
    if occ >= PO_THRESHOLD:
        return "PO"
    if outside_fraction(box, frame_size) >= FC_THRESHOLD:
        return "FC"
    return "CL"


# -- rendering -------------------------------------------------------------------


def _draw_rect(img: np.ndarray, box, color) -> None:
    H, W = img.shape[:2]
    x1 = max(0, int(round(box[0])))
    y1 = max(0, int(round(box[1])))
    x2 = min(W, int(round(box[0] + box[2])))
    y2 = min(H, int(round(box[1] + box[3])))
    if x2 > x1 and y2 > y1:
        img[y1:y2, x1:x2] = color


def _draw_ellipse(img: np.ndarray, box, color) -> None:
    H, W = img.shape[:2]
    cx, cy = box[0] + box[2] / 2, box[1] + box[3] / 2
    rx, ry = box[2] / 2, box[3] / 2
    x1 = max(0, int(math.floor(cx - rx)))
    y1 = max(0, int(math.floor(cy - ry)))
    x2 = min(W, int(math.ceil(cx + rx)) + 1)
    y2 = min(H, int(math.ceil(cy + ry)) + 1)
    if x2 <= x1 or y2 <= y1:
        return
    ys, xs = np.mgrid[y1:y2, x1:x2]
    mask = ((xs + 0.5 - cx) / rx) ** 2 + ((ys + 0.5 - cy) / ry) ** 2 <= 1.0
    img[y1:y2, x1:x2][mask] = color


_SHAPES = {"rect": _draw_rect, "ellipse": _draw_ellipse}


class _Walker:
    """Damped random walk confined to a margin inside the frame."""

    def __init__(self, rng, frame_size, half_w, half_h, noise):
        self.rng = rng
        self.frame_size = frame_size
        self.margin_x = half_w + 16
        self.margin_y = half_h + 16
        self.noise = noise
        self.x = rng.uniform(self.margin_x, frame_size - self.margin_x)
        self.y = rng.uniform(self.margin_y, frame_size - self.margin_y)
        self.vx = rng.normal(0, noise)
        self.vy = rng.normal(0, noise)

    def step(self):
        self.vx = 0.9 * self.vx + self.rng.normal(0, self.noise)
        self.vy = 0.9 * self.vy + self.rng.normal(0, self.noise)
        self.x += self.vx
        self.y += self.vy
        if self.x < self.margin_x or self.x > self.frame_size - self.margin_x:
            self.vx = -self.vx
            self.x = float(np.clip(self.x, self.margin_x, self.frame_size - self.margin_x))
        if self.y < self.margin_y or self.y > self.frame_size - self.margin_y:
            self.vy = -self.vy
            self.y = float(np.clip(self.y, self.margin_y, self.frame_size - self.margin_y))
        return self.x, self.y


def generate_sequence(config: SyntheticSceneConfig, seq_id: str | None = None) -> Sequence:
    config.validate()
    rng = np.random.default_rng(config.seed)
    fs = config.frame_size
    L = config.length

    # Scene palette: muted background, a saturated target hue drawn from the
    # full color circle (so targets of different sequences look different),
    # and desaturated same-hue kin for the distractors.
    bg = rng.integers(50, 90, size=3)
    hue = float(rng.uniform(0.0, 1.0))
    sat = float(rng.uniform(0.70, 0.95))
    val = float(rng.uniform(0.80, 0.98))
    target_color = np.array(
        [int(round(255 * c)) for c in colorsys.hsv_to_rgb(hue, sat, val)]
    )
    occluder_color = np.array([80, 95, 110])
    shape_name = str(rng.choice(("rect", "ellipse")))
    draw_shape = _SHAPES[shape_name]

    tw = float(rng.uniform(*config.target_size_range))
    th = float(rng.uniform(*config.target_size_range))
    target = _Walker(rng, fs, tw / 2, th / 2, config.motion_noise)

    distractors = []
    for _ in range(config.num_distractors):
        dw = float(rng.uniform(*config.target_size_range))
        dh = float(rng.uniform(*config.target_size_range))
        d_hue = (hue + float(rng.uniform(0.06, 0.16)) * float(rng.choice((-1, 1)))) % 1.0
        color = np.array(
            [
                int(round(255 * c))
                for c in colorsys.hsv_to_rgb(d_hue, sat * 0.7, val * 0.75)
            ]
        )
        distractors.append(
            (_Walker(rng, fs, dw / 2, dh / 2, config.motion_noise), dw, dh, color)
        )

    occ_side = config.occluder_scale * max(tw, th)
    occ_t0, occ_t1 = int(0.30 * L), int(0.60 * L)
    exit_t0, exit_t1 = int(0.70 * L), int(0.95 * L)

    # Background texture: a fixed vertical gradient, quantized to uint8.
    grad = np.linspace(-12, 12, fs).astype(np.int16)
    base = np.clip(bg[None, None, :] + grad[:, None, None], 0, 255).astype(np.uint8)
    base = np.ascontiguousarray(np.broadcast_to(base, (fs, fs, 3)))

    frames, annotations = [], []
    exit_edge = None
    for t in range(L):
        x, y = target.step()
        in_exit = config.exit_enabled and exit_t0 <= t < exit_t1
        if in_exit:
            if exit_edge is None:
                exit_edge = "right" if x >= fs / 2 else "left"
            q = (t - exit_t0) / max(1, exit_t1 - 1 - exit_t0)
            out = 1.0 - abs(2.0 * q - 1.0)  # 0 -> 1 -> 0 triangle
            reach = tw + 28.0
            if exit_edge == "right":
                x = fs - tw / 2 - 14.0 + out * reach
            else:
                x = tw / 2 + 14.0 - out * reach
            target.x, target.vx = x, 0.0

        box = (x - tw / 2, y - th / 2, tw, th)

        occluder_box = None
        if config.occluder_enabled and occ_t0 <= t < occ_t1:
            p = (t - occ_t0) / max(1, occ_t1 - 1 - occ_t0)
            sweep = occ_side / 2 + tw / 2 + 6.0
            ox = x + (2.0 * p - 1.0) * sweep
            occluder_box = (ox - occ_side / 2, y - occ_side / 2, occ_side, occ_side)

        img = base.copy()
        for walker, dw, dh, color in distractors:
            dx, dy = walker.step()
            draw_shape(img, (dx - dw / 2, dy - dh / 2, dw, dh), color)
        draw_shape(img, box, target_color)
        if occluder_box is not None:
            _draw_rect(img, occluder_box, occluder_color)

        vis = classify_visibility(box, occluder_box, fs)
        annotations.append(
            FrameAnnotation(box=None if vis == "AB" else box, visibility=vis)
        )
        frames.append(img)

    return Sequence(
        seq_id=seq_id or f"seq_{config.seed:06d}",
        frames=frames,
        annotations=annotations,
        meta={"seed": config.seed, "length": L, "frame_size": fs},
    )


# -- cropping and augmentation ----------------------------------------------------


def crop_transform(box, context_factor: float, out_size: int):
    """Affine frame->crop mapping: returns (origin_x, origin_y, scale)."""
    x, y, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise DegenerateBoxError(f"cannot crop around degenerate box {box}")
    side = context_factor * math.sqrt(w * h)
    ox = x + w / 2 - side / 2
    oy = y + h / 2 - side / 2
    return ox, oy, out_size / side


def box_to_crop(box, transform):
    ox, oy, s = transform
    x, y, w, h = box
    return ((x - ox) * s, (y - oy) * s, w * s, h * s)


def box_from_crop(box, transform):
    ox, oy, s = transform
    x, y, w, h = box
    return (x / s + ox, y / s + oy, w / s, h / s)


def crop_patch(frame: np.ndarray, box, context_factor: float, out_size: int) -> np.ndarray:
    """Square context crop resized to ``out_size``; float32 CHW in [0, 1].

    Regions outside the frame are exactly zero.
    """
    ox, oy, s = crop_transform(box, context_factor, out_size)
    H, W = frame.shape[:2]
    # Zero border of one pixel implements the padding: any neighbor index
    # outside the frame clips onto an exactly-zero row or column.
    padded = np.zeros((H + 2, W + 2, 3), dtype=np.float32)
    if frame.dtype == np.uint8:
        np.multiply(frame, np.float32(1.0 / 255.0), out=padded[1 : H + 1, 1 : W + 1])
    else:
        padded[1 : H + 1, 1 : W + 1] = frame
    # Sample positions in pixel-center space; interpolation is separable
    # (rows first, then columns, which keeps the gathers cache-friendly).
    coords = (np.arange(out_size, dtype=np.float64) + 0.5) / s
    px = ox + coords - 0.5
    py = oy + coords - 0.5
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = (px - x0).astype(np.float32)
    fy = (py - y0).astype(np.float32)
    xi0 = np.clip(x0 + 1, 0, W + 1)
    xi1 = np.clip(x0 + 2, 0, W + 1)
    yi0 = np.clip(y0 + 1, 0, H + 1)
    yi1 = np.clip(y0 + 2, 0, H + 1)
    rows = padded[yi0] * (1 - fy)[:, None, None] + padded[yi1] * fy[:, None, None]
    out = rows[:, xi0] * (1 - fx)[None, :, None] + rows[:, xi1] * fx[None, :, None]
    return np.ascontiguousarray(out.transpose(2, 0, 1).astype(np.float32))


def hflip(patch: np.ndarray, box, out_size: int | None = None):
    """Mirror a CHW patch and its box; applying twice restores both."""
    size = out_size if out_size is not None else patch.shape[2]
    x, y, w, h = box
    return np.ascontiguousarray(patch[:, :, ::-1]), (size - (x + w), y, w, h)


def adjust_brightness(patch: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(patch * np.float32(factor), 0.0, 1.0)


def augment(patch: np.ndarray, box, seed: int):
    """Seeded flip (p=0.5) plus brightness scaling in [0.6, 1.4]."""
    rng = np.random.default_rng(seed)
    if rng.random() < 0.5:
        patch, box = hflip(patch, box)
    factor = float(rng.uniform(0.6, 1.4))
    return adjust_brightness(patch, factor), box


def draw_box_outline(frame: np.ndarray, box, color, thickness: int = 2) -> np.ndarray:
    """Copy of ``frame`` with a rectangle outline drawn over it."""
    out = frame.copy()
    H, W = out.shape[:2]
    x1 = int(round(box[0]))
    y1 = int(round(box[1]))
    x2 = int(round(box[0] + box[2]))
    y2 = int(round(box[1] + box[3]))
    t = thickness
    bands = [
        (y1, y1 + t, x1, x2),
        (y2 - t, y2, x1, x2),
        (y1, y2, x1, x1 + t),
        (y1, y2, x2 - t, x2),
    ]
    for by1, by2, bx1, bx2 in bands:
        by1, by2 = max(0, by1), min(H, by2)
        bx1, bx2 = max(0, bx1), min(W, bx2)
        if by2 > by1 and bx2 > bx1:
            out[by1:by2, bx1:bx2] = color
    return out


# -- PPM and sequence I/O -----------------------------------------------------------


def write_ppm(path: str, img: np.ndarray) -> None:
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("write_ppm expects uint8 (H, W, 3)")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P6":
        raise AnnotationParseError(f"{path}: not a binary PPM file")
    w, h = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise AnnotationParseError(f"{path}: unsupported maxval {parts[2]!r}")
    data = np.frombuffer(parts[3][: w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise AnnotationParseError(f"{path}: truncated pixel payload")
    return data.reshape(h, w, 3).copy()


def _format_annotation(ann: FrameAnnotation) -> str:
    if ann.visibility == "AB":
        return "NaN,NaN,NaN,NaN,AB"
    x, y, w, h = ann.box
    return f"{x!r},{y!r},{w!r},{h!r},{ann.visibility}"


def _parse_annotation(line: str, lineno: int) -> FrameAnnotation:
    tokens = line.strip().split(",")
    if len(tokens) != 5:
        raise AnnotationParseError(f"line {lineno}: expected 5 fields, got {len(tokens)}")
    vis = tokens[4]
    if vis not in VISIBILITY_CLASSES:
        raise AnnotationParseError(f"line {lineno}: unknown visibility token {vis!r}")
    if vis == "AB":
        return FrameAnnotation(box=None, visibility="AB")
    try:
        box = tuple(float(t) for t in tokens[:4])
    except ValueError as e:
        raise AnnotationParseError(f"line {lineno}: bad box value ({e})") from None
    return FrameAnnotation(box=box, visibility=vis)


def save_sequence(seq: Sequence, directory: str) -> None:
    frames_dir = os.path.join(directory, "frames")
    os.makedirs(frames_dir, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        write_ppm(os.path.join(frames_dir, f"frame_{i:06d}.ppm"), frame)
    with open(os.path.join(directory, "groundtruth.txt"), "w") as f:
        for ann in seq.annotations:
            f.write(_format_annotation(ann) + "\n")
    with open(os.path.join(directory, "meta.txt"), "w") as f:
        f.write(f"seq_id={seq.seq_id}\n")
        for key in ("seed", "length", "frame_size"):
            if key in seq.meta:
                f.write(f"{key}={seq.meta[key]}\n")


def load_sequence(directory: str) -> Sequence:
    meta: dict = {}
    meta_path = os.path.join(directory, "meta.txt")
    if os.path.exists(meta_path):
        with open(meta_path) as f:
            for line in f:
                line = line.strip()
                if line:
                    key, _, value = line.partition("=")
                    meta[key] = value
    seq_id = meta.pop("seq_id", os.path.basename(os.path.normpath(directory)))
    meta = {k: int(v) for k, v in meta.items()}
    annotations = []
    with open(os.path.join(directory, "groundtruth.txt")) as f:
        for lineno, line in enumerate(f, start=1):
            if line.strip():
                annotations.append(_parse_annotation(line, lineno))
    frames = []
    frames_dir = os.path.join(directory, "frames")
    for i in range(len(annotations)):
        frames.append(read_ppm(os.path.join(frames_dir, f"frame_{i:06d}.ppm")))
    return Sequence(seq_id=seq_id, frames=frames, annotations=annotations, meta=meta)


def save_dataset(sequences: list, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "manifest.txt"), "w") as f:
        for seq in sequences:
            f.write(f"{seq.seq_id} seed={seq.meta.get('seed', '')}\n")
    for seq in sequences:
        save_sequence(seq, os.path.join(directory, seq.seq_id))


def load_dataset(directory: str) -> list:
    manifest = os.path.join(directory, "manifest.txt")
    if os.path.exists(manifest):
        with open(manifest) as f:
            ids = [line.split()[0] for line in f if line.strip()]
    else:
        ids = sorted(
            d for d in os.listdir(directory)
            if os.path.isdir(os.path.join(directory, d))
        )
    return [load_sequence(os.path.join(directory, sid)) for sid in ids]
