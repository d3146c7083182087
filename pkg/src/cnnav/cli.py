"""Command-line entry point: ``cnnav <command> [flags] --out DIR``.

Commands: gen, train, eval, ablate, gradcheck, visualize.

Every command writes only under ``--out`` and appends one JSON record to
``<out>/manifest.jsonl`` (command, resolved flags, seed, artifacts, version,
start/end timestamps, exit code).

Exit codes:
    0  success
    1  I/O failure (missing or unreadable files, malformed rasters or index)
    2  invalid flags or flag values
    3  checkpoint mismatch, corrupt checkpoint, or a checkpoint without attention
    4  training aborted on a non-finite loss or gradient
    5  gradient check above threshold
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DatasetFormatError, RasterFormatError, SyntheticSpec, generate_synthetic, load_dataset, load_ppm, save_dataset
from .model import VARIANTS, infer_model
from .trainer import NonFiniteError, TrainConfig, evaluate, run_ablation, train, write_metrics_csv

log = logging.getLogger("cnnav")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_CHECKPOINT, EXIT_NONFINITE, EXIT_GRADCHECK = 0, 1, 2, 3, 4, 5


class UsageError(ValueError):
    """A flag value that parses but makes no sense."""


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _seeds(text: str) -> List[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _train_config(args, variant: Optional[str] = None, seed: Optional[int] = None) -> TrainConfig:
    # ablate has neither --variant nor --seed; run_ablation overrides both per run
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr_backbone=args.lr_backbone,
        lr_other=args.lr_other,
        momentum=args.momentum,
        weight_decay=args.wd,
        lr_schedule=args.lr_schedule,
        seed=getattr(args, "seed", 0) if seed is None else seed,
        variant=getattr(args, "variant", "full") if variant is None else variant,
        eval_batch_size=args.eval_batch,
    )


def _rel(path: Path, out: Path) -> str:
    return str(path.relative_to(out))


# --------------------------------------------------------------------------
# commands; each returns (exit code, artifact list)
# --------------------------------------------------------------------------


def cmd_gen(args, out: Path):
    spec = SyntheticSpec(
        num_classes=args.classes,
        samples_per_class=args.per_class,
        image_size=args.size,
        motif_size=args.motif,
        noise_std=args.noise,
        seed=args.seed,
    )
    ds = generate_synthetic(spec)
    index = save_dataset(ds, out)
    log.info("wrote %d images to %s", len(ds), out)
    return EXIT_OK, [_rel(index, out)] + [f"img_{i:05d}.ppm" for i in range(len(ds))]


def cmd_train(args, out: Path):
    ds = load_dataset(args.data)
    cfg = _train_config(args)
    res = train(ds, cfg)
    save_checkpoint(out / "final.ckpt", res.final_state)
    save_checkpoint(out / "best.ckpt", res.best_state)
    write_metrics_csv(res.history, out / "metrics.csv")
    final = res.final_row("test")
    print(f"{cfg.variant} seed={cfg.seed}: final test accuracy {final.accuracy:.4f} (best {res.best_epoch})")
    return EXIT_OK, ["final.ckpt", "best.ckpt", "metrics.csv"]


def cmd_eval(args, out: Path):
    ds = load_dataset(args.data)
    state = load_checkpoint(args.checkpoint)
    model = infer_model(state, ds.images.shape[-1])
    if model.num_classes != ds.num_classes:
        raise CheckpointError(f"checkpoint predicts {model.num_classes} classes, dataset has {ds.num_classes}")
    row = evaluate(model, ds, args.split, args.batch)
    row.variant = model.variant
    write_metrics_csv([row], out / "eval.csv")
    print(f"{model.variant} {args.split} accuracy {row.accuracy:.4f} loss {row.loss:.4f}")
    return EXIT_OK, ["eval.csv"]


def cmd_ablate(args, out: Path):
    ds = load_dataset(args.data)
    base = _train_config(args)
    res = run_ablation(ds, base, args.seeds)
    res.write_tsv(out / "ablation.tsv")
    artifacts = ["ablation.tsv"]
    for (variant, seed), history in sorted(res.histories.items()):
        name = f"metrics_{variant}_seed{seed}.csv"
        write_metrics_csv(history, out / name)
        artifacts.append(name)
    for variant, median in res.medians().items():
        print(f"{variant:<10} median test accuracy {median:.4f}")
    return EXIT_OK, artifacts


def cmd_gradcheck(args, out: Path):
    from .checks import micro_gradcheck

    report = micro_gradcheck(args.variant, seed=args.seed, n_samples=args.samples)
    text = report.format()
    (out / "report.txt").write_text(text + "\n")
    print(text)
    if not report.max_rel_error < args.threshold:
        w = report.worst
        print(f"gradcheck FAILED: max rel error {report.max_rel_error:.3e} >= {args.threshold:g} at {w.name}", file=sys.stderr)
        return EXIT_GRADCHECK, ["report.txt"]
    return EXIT_OK, ["report.txt"]


def cmd_visualize(args, out: Path):
    from .visualize import NoAttentionError, export_attention_maps

    state = load_checkpoint(args.checkpoint)
    models = {}
    artifacts = []
    for path in args.images:
        image = load_ppm(path)
        size = image.shape[-1]
        if size not in models:
            models[size] = infer_model(state, size)
        try:
            written = export_attention_maps(models[size], image, out, Path(path).stem)
        except NoAttentionError as exc:
            raise CheckpointError(str(exc)) from None
        artifacts.extend(sorted(written))
    return EXIT_OK, artifacts


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "visualize": cmd_visualize,
}


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser, variant: bool = True) -> None:
    if variant:
        p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--eval-batch", type=int, default=64)
    p.add_argument("--lr-backbone", type=float, default=0.001)
    p.add_argument("--lr-other", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--wd", type=float, default=5e-4)
    p.add_argument("--lr-schedule", choices=("constant", "cosine"), default="constant")
    p.add_argument("--data", required=True, help="dataset directory with index.tsv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cnnav", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"cnnav {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--motif", type=int, default=None, help="motif side (default size//8)")
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train one variant")
    _add_train_flags(p)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--batch", type=int, default=64)

    p = sub.add_parser("ablate", help="train all four variants over several seeds")
    _add_train_flags(p, variant=False)
    p.add_argument("--seeds", type=_seeds, default=[1, 2, 3, 4, 5])

    p = sub.add_parser("gradcheck", help="finite-difference check of the micro model")
    p.add_argument("--threshold", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=VARIANTS, default="full")

    p = sub.add_parser("visualize", help="export attention maps as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="+", required=True)

    for p in sub.choices.values():
        p.add_argument("--out", required=True, help="output directory; nothing is written elsewhere")
    return parser


def _validate(args) -> None:
    for name in ("batch", "eval_batch", "epochs", "samples", "per_class", "classes", "size"):
        value = getattr(args, name, None)
        if value is not None and value < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be >= 1, got {value}")
    if getattr(args, "threshold", 0.0) < 0:
        raise UsageError("--threshold must be >= 0")


# --------------------------------------------------------------------------
# main
# --------------------------------------------------------------------------


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="milliseconds")


def _append_manifest(out: Path, record: dict) -> None:
    with open(out / "manifest.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad flags, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    out = Path(args.out)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "verbose")}
    record = {
        "command": args.command,
        "config": flags,
        "seed": flags.get("seed", flags.get("seeds")),
        "version": __version__,
        "threads": int(os.environ.get("CNNAV_THREADS", "1")) if args.command == "ablate" else 1,
        "start": _now(),
    }
    artifacts: List[str] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create {out}: {exc}", file=sys.stderr)
        return EXIT_IO

    try:
        _validate(args)
        code, artifacts = COMMANDS[args.command](args, out)
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        code = EXIT_CHECKPOINT
    except NonFiniteError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        code = EXIT_NONFINITE
    except (OSError, RasterFormatError, DatasetFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        code = EXIT_IO
    except ValueError as exc:  # config validation (UsageError, TrainConfig, SyntheticSpec)
        print(f"invalid arguments: {exc}", file=sys.stderr)
        code = EXIT_USAGE

    record.update(artifacts=artifacts, end=_now(), exit_code=code)
    try:
        _append_manifest(out, record)
    except OSError as exc:
        print(f"error: cannot write manifest: {exc}", file=sys.stderr)
        return code or EXIT_IO
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
