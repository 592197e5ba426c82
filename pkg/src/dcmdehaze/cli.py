"""Command-line entry point for the unpaired dehazing pipeline.

Subcommands cover the full workflow: ``synth`` builds a synthetic hazy/clean
dataset, ``train`` runs the cycle-adversarial loop, ``dehaze`` applies a
trained generator to images, ``eval`` scores predictions against references,
and ``ablate`` sweeps component toggles and tabulates the results.

Every run writes its outputs (and a resolved-config snapshot) under ``--out``
and never mutates its inputs. Exit codes are stable: 0 ok, 1 config/usage,
2 I/O, 3 training abort, 4 checkpoint, 5 pairing, 6 partial ablation failure.
Setting DCM_DETERMINISTIC=1 is equivalent to passing --deterministic.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .data import MANIFEST_NAME, build_synthetic_dataset, load_manifest, load_unpaired
from .errors import (CheckpointError, ConfigError, DatasetError,
                     PairingError, ParameterError, TrainingAbortError)
from .image_io import list_images, load_image, save_image
from .metrics import evaluate_pairs
from .networks import dehaze_image, load_generator
from .trainer import (CHECKPOINT_KIND, DESK_PRESET, TABLE2_ROWS, TrainConfig,
                      checkpoint_load, load_train_config, run_ablation, train)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_ABORT = 3
EXIT_CHECKPOINT = 4
EXIT_PAIRING = 5
EXIT_PARTIAL = 6

PRESETS = {"desk": DESK_PRESET, "full": TrainConfig()}


class _Parser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with the config error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _write_snapshot(out_dir: Path, command: str, payload: dict) -> None:
    """Record what this invocation resolved to, next to its outputs."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved_config.json", "w") as fh:
        json.dump({"command": command, **payload}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _deterministic(args) -> bool:
    return bool(args.deterministic) \
        or os.environ.get("DCM_DETERMINISTIC", "") == "1"


def _load_dataset(path):
    """Resolve --data: a manifest (or its directory), or a root holding
    ``hazy/`` and ``clean/`` image directories for unpaired training."""
    path = Path(path)
    if path.name.endswith(".json") or (path / MANIFEST_NAME).exists():
        return load_manifest(path)
    if (path / "hazy").is_dir() and (path / "clean").is_dir():
        return load_unpaired(path / "hazy", path / "clean")
    raise DatasetError(
        f"no dataset at {path}: expected {MANIFEST_NAME} or hazy/ and clean/ "
        f"subdirectories")


def _resolve_train_config(args) -> TrainConfig:
    if args.config is not None:
        config = load_train_config(args.config)
    else:
        config = PRESETS[args.preset]
    if getattr(args, "max_steps", None) is not None:
        config = replace(config, max_steps=args.max_steps)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    return config


def _load_any_generator(path):
    """Accept either a full training checkpoint or a bare generator archive."""
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    manifest_path = path.with_suffix(".json")
    if manifest_path.exists():
        try:
            kind = json.loads(manifest_path.read_text()).get("kind")
        except json.JSONDecodeError:
            kind = None  # let the loader report the integrity failure
        if kind == CHECKPOINT_KIND:
            return checkpoint_load(path).g_dehaze
    return load_generator(path)


def _plot_loss_curve(log_path: Path, plot_path: Path):
    records = [json.loads(line)
               for line in log_path.read_text().splitlines() if line.strip()]
    if not records:
        return None
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [r["step"] for r in records]
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    for key, label in (("total", "weighted total"), ("cyc", "cycle"),
                       ("adv_g", "adversarial (G)"), ("adv_d", "adversarial (D)"),
                       ("contour", "contour")):
        ax.plot(steps, [r[key] for r in records], label=label, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(plot_path, dpi=120)
    plt.close(fig)
    return plot_path


def _parse_rows(spec: str):
    if spec.strip().lower() == "table2":
        return TABLE2_ROWS
    rows = []
    for token in spec.replace(",", " ").split():
        if len(token) != 4 or any(ch not in "01" for ch in token):
            raise ConfigError(
                f"toggle row {token!r} must be 4 characters, each 0 or 1")
        rows.append(tuple(int(ch) for ch in token))
    if not rows:
        raise ConfigError("no toggle rows requested")
    return rows


# --------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    out = Path(args.out)
    _write_snapshot(out, "synth", {"n": args.n, "size": args.size,
                                   "seed": args.seed, "split": args.split,
                                   "out": str(out)})
    manifest = build_synthetic_dataset(out, n=args.n, size=args.size,
                                       seed=args.seed, split=args.split)
    print(f"wrote {len(manifest.entries)} synthetic entries under {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = _resolve_train_config(args)
    manifest = _load_dataset(args.data)
    out = Path(args.out)
    deterministic = _deterministic(args)
    _write_snapshot(out, "train", {
        "data": str(Path(args.data)), "out": str(out),
        "deterministic": deterministic,
        "resume": None if args.resume is None else str(Path(args.resume))})
    state = train(config, manifest, out, deterministic=deterministic,
                  resume_from=args.resume)
    plot = _plot_loss_curve(out / "loss_log.jsonl", out / "loss_curve.png")
    summary = f"trained to step {state.step}"
    if state.ema_total is not None:
        summary += f"; smoothed total loss {state.ema_total:.4f}"
    if plot is not None:
        summary += f"; loss curve at {plot}"
    print(summary)
    return EXIT_OK


def cmd_dehaze(args) -> int:
    gen = _load_any_generator(args.checkpoint)
    source = Path(args.input)
    if source.is_dir():
        inputs = list_images(source)
        if not inputs:
            raise DatasetError(f"no images found in {source}")
    elif source.is_file():
        inputs = [source]
    else:
        raise DatasetError(f"input not found: {source}")
    out = Path(args.out)
    _write_snapshot(out, "dehaze", {
        "checkpoint": str(Path(args.checkpoint)), "input": str(source),
        "out": str(out)})
    for path in inputs:
        save_image(dehaze_image(gen, load_image(path)), out / path.name)
    print(f"dehazed {len(inputs)} image(s) into {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for directory in (pred_dir, gt_dir):
        if not directory.is_dir():
            raise DatasetError(f"not a directory: {directory}")
    out = Path(args.out)
    _write_snapshot(out, "eval", {"pred": str(pred_dir), "gt": str(gt_dir),
                                  "out": str(out)})
    report = evaluate_pairs(pred_dir, gt_dir,
                            out_csv=out / "metrics.csv",
                            out_json=out / "metrics.json")
    for problem in report.errors:
        print(f"pairing: {problem}", file=sys.stderr)
    if report.aggregate:
        agg = report.aggregate
        print(f"aggregate: psnr_db={agg['psnr_db']!r} ssim={agg['ssim']!r} "
              f"ciede2000={agg['ciede2000']!r} (n={len(report.per_image)})")
    else:
        print("aggregate: no scored pairs")
    return EXIT_PAIRING if report.errors or not report.per_image else EXIT_OK


def cmd_ablate(args) -> int:
    config = _resolve_train_config(args)
    rows = _parse_rows(args.rows)
    train_manifest = _load_dataset(args.data)
    test_data = args.test_data if args.test_data is not None else args.data
    test_manifest = _load_dataset(test_data)
    out = Path(args.out)
    deterministic = _deterministic(args)
    _write_snapshot(out, "ablate", {
        "data": str(Path(args.data)), "test_data": str(Path(test_data)),
        "rows": args.rows, "out": str(out), "deterministic": deterministic})
    results = run_ablation(config, train_manifest, test_manifest, out,
                           rows=rows, deterministic=deterministic)
    failed = 0
    for row in results:
        tag = "".join(str(int(row[c])) for c in ("ddscm", "dfre", "att", "bca"))
        if row["status"] == "ok":
            print(f"row {tag}: psnr_db={row['psnr_db']:.4f} "
                  f"ssim={row['ssim']:.6f} ciede2000={row['ciede2000']:.4f}")
        else:
            failed += 1
            print(f"row {tag}: failed ({row['error']})", file=sys.stderr)
    print(f"ablation table written to {out / 'ablation.csv'}")
    return EXIT_PARTIAL if failed else EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dcmdehaze",
                     description="Unpaired image dehazing pipeline")
    sub = parser.add_subparsers(dest="subcommand", required=True,
                                parser_class=_Parser)

    def add_common(p, seed_default=None):
        p.add_argument("--out", required=True,
                       help="directory that receives all outputs")
        p.add_argument("--seed", type=int, default=seed_default,
                       help="random seed")
        p.add_argument("--deterministic", action="store_true",
                       help="make reruns byte-identical")

    def add_train_config(p):
        group = p.add_mutually_exclusive_group(required=True)
        group.add_argument("--config", help="training config JSON")
        group.add_argument("--preset", choices=sorted(PRESETS),
                           help="named built-in training config")
        p.add_argument("--max-steps", type=int, default=None,
                       help="override the config's step budget")
        p.add_argument("--data", required=True,
                       help="dataset root (manifest or hazy/+clean/ dirs)")

    p = sub.add_parser("synth", help="build a synthetic hazy/clean dataset")
    add_common(p, seed_default=0)
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--size", type=int, default=64, help="square image size")
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the cycle-adversarial training loop")
    add_common(p)
    add_train_config(p)
    p.add_argument("--resume", default=None,
                   help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("dehaze", help="apply a trained generator to images")
    add_common(p)
    p.add_argument("--checkpoint", required=True,
                   help="training checkpoint or generator archive (.npz)")
    p.add_argument("--input", required=True, help="image file or directory")
    p.set_defaults(func=cmd_dehaze)

    p = sub.add_parser("eval", help="score predictions against references")
    add_common(p)
    p.add_argument("--pred", required=True, help="directory of predictions")
    p.add_argument("--gt", required=True, help="directory of references")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep component toggles and tabulate")
    add_common(p)
    add_train_config(p)
    p.add_argument("--test-data", default=None,
                   help="evaluation dataset root (defaults to --data)")
    p.add_argument("--rows", default="table2",
                   help="'table2' or toggle bit-patterns like 0000,1111")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAbortError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except PairingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PAIRING
    except (DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
