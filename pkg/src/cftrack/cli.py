"""Command-line entry point: synth, train, track, eval, bench, gradcheck.

Every command is deterministic given its flags.  Errors print one
machine-parseable line (``ERROR:<code>: message``) on stderr and exit
nonzero.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .config import RunConfig, load_config, override
from .data import (
    SyntheticSceneConfig,
    draw_box_outline,
    generate_sequence,
    load_dataset,
    load_sequence,
    save_dataset,
    write_ppm,
)
from .errors import CFTrackError, ConfigError
from .evalbench import (
    confidence_bars_svg,
    count_flops,
    count_params,
    evaluate_dataset,
    format_accounting,
    fps_bench,
    success_curve_svg,
    iou,
)
from .gradcheck import finite_diff_check
from .heads import LossWeights
from .model import CFTrackModel
from .tracker import SiameseTracker, write_results
from .training import (
    TrainConfig,
    checkpoint,
    restore,
    train,
    verification_batch,
    write_loss_csv,
)

RED = (220, 40, 40)
BLUE = (40, 90, 220)


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    cfg = override(cfg, scene={"seed": args.seed})
    out = args.out
    if os.path.isdir(out) and os.listdir(out) and not args.force:
        raise ConfigError(f"output directory {out!r} is not empty (use --force)")
    sequences = []
    for i in range(args.num_sequences):
        scene = replace(cfg.scene, seed=cfg.scene.seed + i)
        sequences.append(generate_sequence(scene, seq_id=f"seq_{i:04d}"))
    save_dataset(sequences, out)
    print(f"wrote {len(sequences)} sequences to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    cfg = override(cfg, train={"seed": args.seed})
    train_cfg = cfg.train
    if args.no_cfm:
        train_cfg = replace(
            train_cfg,
            negative_fraction=0.0,
            loss_weights=replace(train_cfg.loss_weights, lambda3=0.0),
        )
    dataset = load_dataset(args.data)
    model = CFTrackModel(seed=train_cfg.seed)
    history = train(model, dataset, train_cfg)
    checkpoint(model, args.out)
    loss_log = args.loss_log or args.out + ".loss.csv"
    write_loss_csv(history, loss_log)
    print(
        f"trained {len(history)} steps: total {history[0].total:.4f} -> "
        f"{history[-1].total:.4f}; checkpoint {args.out}; loss log {loss_log}"
    )
    return 0


def cmd_track(args) -> int:
    cfg = load_config(args.config)
    model = restore(args.model)
    sequence = load_sequence(args.sequence)
    tracker = SiameseTracker(model, cfg.tracker)
    from .evalbench import run_sequence

    results = run_sequence(tracker, sequence, online=False)
    write_results(results, args.out)
    if args.overlay:
        os.makedirs(args.overlay, exist_ok=True)
        threshold = cfg.tracker.presence_threshold
        for res in results:
            frame = sequence.frames[res.frame_index]
            if res.box is not None:
                color = BLUE if res.confidence >= threshold else RED
                frame = draw_box_outline(frame, res.box, color)
            write_ppm(
                os.path.join(args.overlay, f"frame_{res.frame_index:06d}.ppm"), frame
            )
    print(f"tracked {len(results)} frames -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model = restore(args.model)
    dataset = load_dataset(args.data)
    report, all_results = evaluate_dataset(model, dataset, cfg.tracker, args.protocol)
    report.save(args.report)
    ious = []
    for seq in dataset:
        for res in all_results[seq.seq_id]:
            ann = seq.annotations[res.frame_index]
            if ann.has_box:
                ious.append(iou(res.box, ann.box) if res.box is not None else 0.0)
    success_curve_svg(ious, args.report + ".success.svg")
    if args.protocol == "online":
        confidence_bars_svg(report.confidence_by_visibility, args.report + ".confidence.svg")
    for line in report.to_lines():
        print(line)
    return 0


def cmd_bench(args) -> int:
    model = restore(args.model)
    print(format_accounting(model))
    report = fps_bench(model, num_frames=args.num_frames, seed=args.seed)
    for line in report.to_lines():
        print(line)
    return 0


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.train.seed
    scenes = [
        replace(cfg.scene, seed=seed + i, length=min(cfg.scene.length, 20),
                occluder_enabled=False, exit_enabled=False)
        for i in range(2)
    ]
    dataset = [generate_sequence(s) for s in scenes]
    model = CFTrackModel(seed=seed)
    loss_fn = verification_batch(model, dataset, replace(cfg.train, seed=seed))
    report = finite_diff_check(
        loss_fn,
        model.named_parameters(),
        h=1e-5,
        tolerance=args.tolerance,
        max_coords_per_tensor=args.coords,
        seed=seed,
        corrupt=args.corrupt,
    )
    print(report.summary())
    for check in report.failures():
        print(
            f"  FAIL {check.name}{list(check.worst_index)}: analytic "
            f"{check.analytic:.6e} vs numeric {check.numeric:.6e} "
            f"(rel {check.max_rel_error:.3e})"
        )
    return 0 if report.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cftrack",
        description="Lightweight Siamese tracker with contrastive feature matching",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-sequences", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--no-cfm", action="store_true",
                   help="baseline ablation: no matching loss, no negative pairs")
    p.add_argument("--loss-log", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="run the tracker over one sequence")
    p.add_argument("--model", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--overlay", default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="evaluate a model over a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=("offline", "online"), required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="print accounting table and measure fps")
    p.add_argument("--model", required=True)
    p.add_argument("--num-frames", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of the objective")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--coords", type=int, default=3)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CFTrackError as e:
        print(f"ERROR:{e.code}: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"ERROR:missing-file: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
