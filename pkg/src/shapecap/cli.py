"""Command-line entry points.

Subcommands: ``gen-data`` (write train/eval splits), ``train`` (run the
two-stage schedule and render loss curves), ``eval`` (score a
checkpoint, write the line-delimited report plus summary figures, and
print the summary table), ``sample`` (print candidates for one scene,
optionally rendering an overlay figure), and ``serve`` (start the HTTP
service).  Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import TrainConfig, apply_overrides, read_config, write_config
from .errors import InputError

log = logging.getLogger(__name__)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapecap",
        description="Box-prompted joint caption/mask generation on synthetic scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write deterministic train/eval splits")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--count", type=int, default=2000, help="training scenes")
    gen.add_argument("--eval-count", type=int, default=200, help="held-out scenes")

    tr = sub.add_parser("train", help="run the two-stage training schedule")
    tr.add_argument("--config", help="flat key=value config file")
    tr.add_argument("--seed", type=int, help="override the config seed")
    tr.add_argument("--out", default="runs/default", help="run directory")
    tr.add_argument("--data", help="training dataset file (generated when omitted)")
    tr.add_argument("--eval-data", help="validation dataset file")
    tr.add_argument("--resume", help="checkpoint to resume from")
    tr.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override one config field (repeatable)")

    ev = sub.add_parser("eval", help="score a checkpoint on held-out scenes")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", default="eval", help="report directory")
    ev.add_argument("--data", help="evaluation dataset file (generated when omitted)")
    ev.add_argument("--k", type=int, default=5)
    ev.add_argument("--seed", type=int, default=0, help="sampling seed")
    ev.add_argument("--limit", type=int, help="evaluate only the first N samples")

    sa = sub.add_parser("sample", help="print candidates for one synthetic scene")
    sa.add_argument("--checkpoint", required=True)
    sa.add_argument("--k", type=int, default=5)
    sa.add_argument("--seed", type=int, default=0, help="sampling seed")
    sa.add_argument("--scene-seed", type=int, default=0)
    sa.add_argument("--out", help="also render an overlay figure to this directory")

    se = sub.add_parser("serve", help="start the HTTP inference service")
    se.add_argument("--checkpoint", required=True)
    se.add_argument("--host", default="127.0.0.1")
    se.add_argument("--port", type=int, default=8000)

    return parser


def _load_config(args: argparse.Namespace) -> TrainConfig:
    cfg = read_config(args.config) if args.config else TrainConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise InputError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    if args.seed is not None:
        cfg = apply_overrides(cfg, {"seed": str(args.seed)})
    return cfg


def _cmd_gen_data(args: argparse.Namespace) -> int:
    from .data import generate_dataset, write_dataset

    os.makedirs(args.out, exist_ok=True)
    train_path = os.path.join(args.out, "train.jsonl")
    eval_path = os.path.join(args.out, "eval.jsonl")
    write_dataset(generate_dataset(args.seed, args.count), train_path)
    write_dataset(generate_dataset(args.seed + 1, args.eval_count), eval_path)
    print(f"wrote {args.count} scenes to {train_path}")
    print(f"wrote {args.eval_count} scenes to {eval_path}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    from .data import read_dataset
    from .report import training_curves
    from .training import train

    cfg = _load_config(args)
    train_samples = read_dataset(args.data) if args.data else None
    val_samples = read_dataset(args.eval_data) if args.eval_data else None
    result = train(cfg, train_samples, val_samples, out_dir=args.out,
                   resume_from=args.resume)
    write_config(cfg, os.path.join(args.out, "config.txt"))
    figure = training_curves(result.run_log_path,
                             os.path.join(args.out, "training_curves.png"))
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"run log: {result.run_log_path}")
    print(f"curves: {figure}")
    for name, value in sorted(result.final_val.items()):
        print(f"final val {name}: {value:.4f}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    from .data import generate_dataset, read_dataset
    from .metrics import evaluate_model, summary_table, write_report
    from .report import metric_bars, qualitative_grid
    from .training import load_model

    model, cfg = load_model(args.checkpoint)
    if args.data:
        samples = read_dataset(args.data)
    else:
        samples = generate_dataset(cfg.seed + 1, cfg.eval_size)
    if args.limit is not None:
        samples = samples[: args.limit]
    report = evaluate_model(model, samples, k=args.k, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    report_path = os.path.join(args.out, "report.jsonl")
    write_report(report, report_path)
    metric_bars(report, os.path.join(args.out, "metrics.png"))
    qualitative_grid(model, samples, os.path.join(args.out, "qualitative.png"),
                     seed=args.seed)
    print(summary_table(report))
    print(f"report: {report_path}")
    return 0


def _cmd_sample(args: argparse.Namespace) -> int:
    import torch

    from .data import box_to_px, detokenize, generate_dataset, render_scene
    from .training import load_model

    model, _ = load_model(args.checkpoint)
    sample = generate_dataset(args.scene_seed, 1)[0]
    image = render_scene(sample.scene)
    center = sample.scene.objects[sample.caption.center_object]
    box = box_to_px(center.box, image.shape[:2])
    generator = torch.Generator().manual_seed(args.seed)
    candidates = model.infer(image, box, k=args.k, generator=generator)
    print(f"scene seed {args.scene_seed}, prompt box {list(box)}")
    print(f"ground truth: {detokenize(sample.caption.tokens)}")
    for i, cand in enumerate(candidates):
        masks = " ".join(
            f"{pos}:{int(mask.sum())}px"
            for pos, mask in zip(cand.mask_word_positions, cand.masks)
        )
        print(f"[{i}] score={cand.score:.4f} caption={cand.caption!r} masks={masks}")
    if args.out:
        from .report import qualitative_grid

        os.makedirs(args.out, exist_ok=True)
        figure = qualitative_grid(model, [sample],
                                  os.path.join(args.out, "sample.png"),
                                  k=args.k, seed=args.seed)
        print(f"figure: {figure}")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    from .service import serve

    serve(args.checkpoint, host=args.host, port=args.port)
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sample": _cmd_sample,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # runtime failure -> exit 1 with a clear message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
