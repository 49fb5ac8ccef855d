"""Metrics, evaluation protocols, and cost accounting.

Protocols
---------
offline: initialize on the first annotated frame, track to the end, report
         overlap metrics over frames whose ground truth has a box.
online:  additionally re-template from ground truth on the frame after any
         annotated frame whose IoU drops below 0.8, counting reinits and
         accumulating mean confidence per visibility class.  Frames on which
         the tracker was (re)initialized are excluded from the confidence
         statistics; absent frames never trigger reinits.

Accounting counts multiply-accumulates (MACs) for one template+search pass:
both backbone branches, the correlation and attention gate, both prediction
branches, and one embedding per branch.  Pooling and activations carry no
multiplies and are not counted.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import VISIBILITY_CLASSES, SyntheticSceneConfig, generate_sequence
from .errors import EvalProtocolError
from .model import CFTrackModel
from .tracker import SiameseTracker, TrackResult

REINIT_IOU = 0.8
PRECISION_PIXELS = 20.0
AUC_THRESHOLDS = 101


# -- box metrics -----------------------------------------------------------------


def iou(a, b) -> float:
    """Intersection over union of (x, y, w, h) boxes; 0 when the union is empty."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def cle(a, b) -> float:
    """Euclidean distance between box centers."""
    ax = a[0] + a[2] / 2.0
    ay = a[1] + a[3] / 2.0
    bx = b[0] + b[2] / 2.0
    by = b[1] + b[3] / 2.0
    return math.hypot(ax - bx, ay - by)


def success_auc(ious) -> float:
    """Mean fraction of frames with IoU strictly above each of 101 thresholds."""
    values = list(ious)
    if not values:
        raise EvalProtocolError("success_auc needs at least one IoU value")
    arr = np.asarray(values, dtype=np.float64)
    total = 0.0
    for i in range(AUC_THRESHOLDS):
        tau = i / 100.0
        total += float(np.mean(arr > tau))
    return total / AUC_THRESHOLDS


def precision_at(threshold: float, cles) -> float:
    values = list(cles)
    if not values:
        raise EvalProtocolError("precision_at needs at least one CLE value")
    arr = np.asarray(values, dtype=np.float64)
    return float(np.mean(arr <= threshold))


# -- reports ----------------------------------------------------------------------


@dataclass
class EvalReport:
    protocol: str
    auc: float
    precision_at_20: float
    mean_iou: float
    reinit_count: int
    confidence_by_visibility: dict = field(default_factory=dict)
    absence_accuracy: float | None = None
    frames_evaluated: int = 0
    params: int = 0
    flops: int = 0
    fps: float = 0.0

    def to_lines(self) -> list[str]:
        lines = [
            f"protocol={self.protocol}",
            f"auc={self.auc!r}",
            f"precision_at_20={self.precision_at_20!r}",
            f"mean_iou={self.mean_iou!r}",
            f"reinit_count={self.reinit_count}",
        ]
        for cls in VISIBILITY_CLASSES:
            value = self.confidence_by_visibility.get(cls)
            lines.append(f"conf_{cls}={'nan' if value is None else repr(value)}")
        lines.append(
            "absence_accuracy="
            + ("nan" if self.absence_accuracy is None else repr(self.absence_accuracy))
        )
        lines.append(f"frames_evaluated={self.frames_evaluated}")
        lines.append(f"params={self.params}")
        lines.append(f"flops={self.flops}")
        lines.append(f"fps={self.fps!r}")
        return lines

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write("\n".join(self.to_lines()) + "\n")
        with open(path + ".json", "w") as f:
            json.dump(self.__dict__, f, indent=1, default=lambda v: None)
            f.write("\n")


# -- protocol internals ------------------------------------------------------------


@dataclass
class _Accumulator:
    ious: list = field(default_factory=list)
    cles: list = field(default_factory=list)
    conf: dict = field(default_factory=lambda: {c: [] for c in VISIBILITY_CLASSES})
    reinits: int = 0
    frames: int = 0
    absent_total: int = 0
    absent_correct: int = 0

    def report(self, protocol: str, params: int = 0, flops: int = 0) -> EvalReport:
        conf_means = {
            c: (float(np.mean(v)) if v else None) for c, v in self.conf.items()
        }
        return EvalReport(
            protocol=protocol,
            auc=success_auc(self.ious),
            precision_at_20=precision_at(PRECISION_PIXELS, self.cles),
            mean_iou=float(np.mean(self.ious)),
            reinit_count=self.reinits,
            confidence_by_visibility=conf_means,
            absence_accuracy=(
                self.absent_correct / self.absent_total if self.absent_total else None
            ),
            frames_evaluated=self.frames,
            params=params,
            flops=flops,
        )


def _first_annotated(sequence) -> int:
    for t, ann in enumerate(sequence.annotations):
        if ann.has_box:
            return t
    raise EvalProtocolError(f"sequence {sequence.seq_id} has no annotated frames")


def run_sequence(tracker, sequence, online: bool,
                 acc: _Accumulator | None = None) -> list[TrackResult]:
    """Track one sequence, optionally with the reinit protocol, filling ``acc``."""
    if not sequence.annotations:
        raise EvalProtocolError(f"sequence {sequence.seq_id} is unannotated")
    acc = acc if acc is not None else _Accumulator()
    t0 = _first_annotated(sequence)
    tracker.init(sequence.frames[t0], sequence.annotations[t0].box, frame_index=t0)
    results = [
        TrackResult(t0, sequence.annotations[t0].box, 1.0, 1.0, True)
    ]
    skip_confidence = {t0}
    acc.ious.append(1.0)
    acc.cles.append(0.0)
    acc.frames += 1
    pending_reinit = False
    for t in range(t0 + 1, len(sequence)):
        ann = sequence.annotations[t]
        if online and pending_reinit and ann.has_box:
            tracker.reinit(sequence.frames[t], ann.box)
            skip_confidence.add(t)
            pending_reinit = False
        res = tracker.track(sequence.frames[t])
        results.append(res)
        acc.frames += 1
        if ann.has_box:
            frame_iou = iou(res.box, ann.box) if res.box is not None else 0.0
            acc.ious.append(frame_iou)
            acc.cles.append(cle(res.box, ann.box) if res.box is not None else math.inf)
            if online and frame_iou < REINIT_IOU:
                acc.reinits += 1
                pending_reinit = True
        else:
            acc.absent_total += 1
            if not res.present:
                acc.absent_correct += 1
        if t not in skip_confidence:
            acc.conf[ann.visibility].append(res.confidence)
    return results


def online_eval(tracker, sequence, params: int = 0, flops: int = 0):
    acc = _Accumulator()
    results = run_sequence(tracker, sequence, online=True, acc=acc)
    return acc.report("online", params, flops), results


def offline_eval(tracker, sequence, params: int = 0, flops: int = 0):
    acc = _Accumulator()
    results = run_sequence(tracker, sequence, online=False, acc=acc)
    return acc.report("offline", params, flops), results


def evaluate_dataset(model: CFTrackModel, sequences, tracker_config,
                     protocol: str) -> tuple[EvalReport, dict]:
    """Pool per-frame statistics over sequences with a fresh tracker each."""
    if protocol not in ("offline", "online"):
        raise EvalProtocolError(f"unknown protocol {protocol!r}")
    acc = _Accumulator()
    all_results = {}
    for seq in sequences:
        tracker = SiameseTracker(model, tracker_config)
        all_results[seq.seq_id] = run_sequence(
            tracker, seq, online=(protocol == "online"), acc=acc
        )
    report = acc.report(protocol, count_params(model), count_flops(model))
    return report, all_results


# -- parameter and MAC accounting ----------------------------------------------------


def _row_params(row: dict) -> int:
    cin, cout, k = row["cin"], row["cout"], row["k"]
    if row["kind"] == "conv":
        return cout * cin * k * k + cout
    if row["kind"] == "ds":
        return cin * k * k + cin + cout * cin + cout
    if row["kind"] == "fc":
        return cout * cin + cout
    return 0  # correlation and gating carry no parameters


def _out_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _row_macs(row: dict, in_size: int) -> tuple[int, int]:
    """(macs, out_size) for one instance of a layer at ``in_size`` input."""
    cin, cout, k = row["cin"], row["cout"], row["k"]
    kind = row["kind"]
    if kind in ("conv", "ds"):
        out = _out_size(in_size, k, row["stride"], row["padding"])
        if kind == "conv":
            return cout * cin * k * k * out * out, out
        return cin * k * k * out * out + cout * cin * out * out, out
    if kind == "fc":
        return cout * cin, in_size
    if kind == "pixelwise-corr":
        return cout * cin * in_size * in_size, in_size
    if kind == "gate":
        return cout * in_size * in_size, in_size
    raise ValueError(f"unknown layer kind {kind!r}")


def accounting_table(model: CFTrackModel) -> list[dict]:
    """Per-instance rows (branch-expanded) with exact params and MACs."""
    cfg = model.config.backbone
    rows = []

    def add(row, instance, in_size, count_parameters):
        macs, out = _row_macs(row, in_size)
        rows.append(
            {
                "name": f"{row['name']}[{instance}]",
                "kind": row["kind"],
                "cin": row["cin"],
                "cout": row["cout"],
                "k": row["k"],
                "in_size": in_size,
                "out_size": out,
                "params": _row_params(row) if count_parameters else 0,
                "macs": macs,
            }
        )
        return out

    for instance, size in (("template", cfg.template_size), ("search", cfg.search_size)):
        n = size
        for i, row in enumerate(model.backbone.layer_table()):
            n = add(row, instance, n, count_parameters=(instance == "template"))
    for row in model.fusion.layer_table():
        in_size = 17 if row["kind"] in ("pixelwise-corr", "gate") else 1
        add(row, "fused", in_size, count_parameters=True)
    for instance in ("template", "search"):
        for row in model.embedder.layer_table():
            add(row, instance, 9, count_parameters=(instance == "template"))
    for row in model.heads.layer_table():
        add(row, "fused", 17, count_parameters=True)
    return rows


def count_params(model: CFTrackModel) -> int:
    return sum(r["params"] for r in accounting_table(model))


def count_flops(model: CFTrackModel) -> int:
    """Total MACs of one template+search forward pass."""
    return sum(r["macs"] for r in accounting_table(model))


def format_accounting(model: CFTrackModel) -> str:
    rows = accounting_table(model)
    header = f"{'layer':34s} {'kind':14s} {'in':>4s} {'out':>4s} {'params':>9s} {'macs':>12s}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r['name']:34s} {r['kind']:14s} {r['in_size']:>4d} {r['out_size']:>4d} "
            f"{r['params']:>9d} {r['macs']:>12d}"
        )
    lines.append("-" * len(header))
    lines.append(
        f"{'total':34s} {'':14s} {'':>4s} {'':>4s} "
        f"{count_params(model):>9d} {count_flops(model):>12d}"
    )
    return "\n".join(lines)


# -- speed benchmark -----------------------------------------------------------------


@dataclass
class BenchReport:
    fps_mean: float
    fps_std: float
    runs: list
    num_frames: int
    params: int
    flops: int

    def to_lines(self) -> list[str]:
        return [
            f"fps_mean={self.fps_mean:.2f}",
            f"fps_std={self.fps_std:.2f}",
            f"num_frames={self.num_frames}",
            f"params={self.params}",
            f"flops={self.flops}",
        ]


def fps_bench(model: CFTrackModel, num_frames: int, seed: int = 0,
              tracker_config=None, repeats: int = 3) -> BenchReport:
    """Wall-clock track_frame throughput after 5 warm-up frames."""
    if num_frames < 10:
        raise EvalProtocolError("fps_bench needs at least 10 frames")
    warmup = 5
    seq = generate_sequence(
        SyntheticSceneConfig(
            seed=seed, length=num_frames + warmup + 1, occluder_enabled=False
        )
    )
    fps_runs = []
    for _ in range(repeats):
        tracker = SiameseTracker(model, tracker_config)
        tracker.init(seq.frames[0], seq.annotations[0].box)
        for t in range(1, warmup + 1):
            tracker.track(seq.frames[t])
        start = time.perf_counter()
        for t in range(warmup + 1, warmup + 1 + num_frames):
            tracker.track(seq.frames[t])
        elapsed = time.perf_counter() - start
        fps_runs.append(num_frames / elapsed)
    return BenchReport(
        fps_mean=float(np.mean(fps_runs)),
        fps_std=float(np.std(fps_runs)),
        runs=fps_runs,
        num_frames=num_frames,
        params=count_params(model),
        flops=count_flops(model),
    )


# -- SVG plots -------------------------------------------------------------------------


_SVG_HEADER = '<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">'


def success_curve_svg(ious, path: str, width: int = 480, height: int = 320) -> None:
    """Success rate against the 101-threshold grid, as a polyline."""
    arr = np.asarray(list(ious), dtype=np.float64)
    if arr.size == 0:
        raise EvalProtocolError("success curve needs at least one IoU value")
    margin = 40
    pts = []
    for i in range(AUC_THRESHOLDS):
        tau = i / 100.0
        rate = float(np.mean(arr > tau))
        x = margin + tau * (width - 2 * margin)
        y = height - margin - rate * (height - 2 * margin)
        pts.append(f"{x:.2f},{y:.2f}")
    lines = [
        _SVG_HEADER.format(w=width, h=height),
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        f'<polyline fill="none" stroke="#1f6fb2" stroke-width="2" points="{" ".join(pts)}"/>',
        f'<text x="{width // 2}" y="{height - 8}" text-anchor="middle" '
        f'font-size="12">IoU threshold</text>',
        f'<text x="12" y="{height // 2}" font-size="12" transform="rotate(-90 12 '
        f'{height // 2})" text-anchor="middle">success rate</text>',
        f'<text x="{width - margin}" y="{margin - 8}" text-anchor="end" font-size="12">'
        f"AUC={success_auc(arr):.4f}</text>",
        "</svg>",
    ]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def confidence_bars_svg(confidence_by_visibility: dict, path: str,
                        width: int = 480, height: int = 320) -> None:
    """Mean confidence per visibility class as a bar chart."""
    margin = 40
    classes = [c for c in VISIBILITY_CLASSES]
    n = len(classes)
    slot = (width - 2 * margin) / n
    lines = [
        _SVG_HEADER.format(w=width, h=height),
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
    ]
    for i, cls in enumerate(classes):
        value = confidence_by_visibility.get(cls)
        x = margin + i * slot + slot * 0.2
        label_x = margin + (i + 0.5) * slot
        if value is not None:
            bar_h = value * (height - 2 * margin)
            y = height - margin - bar_h
            lines.append(
                f'<rect x="{x:.1f}" y="{y:.1f}" width="{slot * 0.6:.1f}" '
                f'height="{bar_h:.1f}" fill="#b23a1f"/>'
            )
            lines.append(
                f'<text x="{label_x:.1f}" y="{y - 4:.1f}" text-anchor="middle" '
                f'font-size="11">{value:.2f}</text>'
            )
        lines.append(
            f'<text x="{label_x:.1f}" y="{height - margin + 16}" text-anchor="middle" '
            f'font-size="12">{cls}</text>'
        )
    lines.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
