"""Command-line harness.

Subcommands: generate, train, eval, nfe-sweep, mask-sweep, ablate,
paradox, report. Exit codes: 0 success, 1 runtime failure, 2 usage error
(bad flags, missing or malformed config).
"""

from __future__ import annotations

import argparse
import os
import sys
from fractions import Fraction

from . import harness
from .checkerboard import BOARD, build_scene, paradox_mse_table, render_ascii
from .config import ConfigError, ExperimentConfig, load_config, override_seed


class UsageError(Exception):
    """Problems the user can fix by changing the invocation."""


def _add_common(sub: argparse.ArgumentParser, *, needs_config: bool = True) -> None:
    if needs_config:
        sub.add_argument("--config", required=True, help="path to the experiment INI file")
    sub.add_argument("--out", help="run directory (overrides [output] directory)")
    sub.add_argument("--seed", type=int, help="override the training seed")
    sub.add_argument(
        "--deterministic",
        action="store_true",
        help="force deterministic torch kernels",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowcast",
        description="Generative trajectory forecasting for sparse longitudinal 3D images.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    sub = commands.add_parser("generate", help="materialize the synthetic cohort and mask sets")
    _add_common(sub)

    sub = commands.add_parser("train", help="train per config, keep the best-validation checkpoint")
    _add_common(sub)
    sub.add_argument("--quiet", action="store_true", help="suppress per-epoch progress lines")

    sub = commands.add_parser("eval", help="score the checkpoint and the copy-forward baseline")
    _add_common(sub)
    sub.add_argument("--checkpoint", help="checkpoint path (default <out>/checkpoint.pt)")

    sub = commands.add_parser("nfe-sweep", help="forecast quality vs integration steps")
    _add_common(sub)
    sub.add_argument("--checkpoint", help="checkpoint path (default <out>/checkpoint.pt)")
    sub.add_argument(
        "--steps-list",
        default="1,5,10,25,50,100",
        help="comma-separated integration step counts",
    )

    sub = commands.add_parser("mask-sweep", help="degradation when dropping context frames")
    _add_common(sub)
    sub.add_argument("--checkpoint", help="checkpoint path (default <out>/checkpoint.pt)")
    sub.add_argument(
        "--direction",
        choices=["1toT", "Tto1", "both"],
        default="both",
        help="drop the k earliest (1toT) or k latest (Tto1) frames",
    )

    sub = commands.add_parser("ablate", help="train and score the standard ablation variants")
    _add_common(sub)
    sub.add_argument("--quiet", action="store_true", help="suppress per-epoch progress lines")

    sub = commands.add_parser("paradox", help="exact checkerboard forecasting paradox")
    _add_common(sub, needs_config=False)

    sub = commands.add_parser("report", help="summarize a finished run directory")
    _add_common(sub, needs_config=False)
    sub.add_argument("--config", help="optional config to locate the run directory")

    return parser


def _load(args: argparse.Namespace) -> tuple[ExperimentConfig, str]:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    if args.seed is not None:
        cfg = override_seed(cfg, args.seed)
    out_dir = args.out or cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    return cfg, out_dir


def _progress(record) -> None:
    print(
        f"epoch {record.epoch:4d}  train {record.train_loss:.6f}  "
        f"val_mse {record.val_mse:.6f}  val_ssim {record.val_ssim:.4f}  lr {record.lr:.2e}"
    )


def cmd_generate(args) -> int:
    cfg, out_dir = _load(args)
    counts = harness.ensure_cohort(cfg, out_dir)
    total = sum(counts.values())
    for split, count in counts.items():
        print(f"{split}: {count} sequences in {harness.split_dir(out_dir, split)}")
    print(f"generated {total} sequences (hash {cfg.hash()})")
    return 0


def cmd_train(args) -> int:
    cfg, out_dir = _load(args)
    progress = None if args.quiet else _progress
    model, result = harness.run_training(cfg, out_dir, progress=progress)
    print(
        f"best epoch {result.best_epoch} with validation MSE {result.best_val_mse:.6f}; "
        f"checkpoint written to {os.path.join(out_dir, harness.CHECKPOINT_NAME)}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg, out_dir = _load(args)
    report = harness.evaluate(cfg, out_dir, args.checkpoint)
    for label in report.labels():
        agg = report.aggregate(label)
        print(
            f"{label}: mse {agg['mse_mean']:.6f} +- {agg['mse_std']:.6f}  "
            f"ssim {agg['ssim_mean']:.4f}  psnr {agg['psnr_db_mean']:.2f} dB"
        )
    print(f"metrics written to {os.path.join(out_dir, 'metrics.csv')}")
    return 0


def cmd_nfe_sweep(args) -> int:
    cfg, out_dir = _load(args)
    try:
        steps_list = [int(tok) for tok in args.steps_list.split(",") if tok.strip()]
    except ValueError as exc:
        raise UsageError(f"--steps-list must be comma-separated integers: {exc}") from exc
    if not steps_list or min(steps_list) < 1:
        raise UsageError("--steps-list needs positive integers")
    rows = harness.nfe_sweep(cfg, out_dir, args.checkpoint, steps_list)
    for row in rows:
        print(
            f"steps {row['steps']:4d} (evals {row['field_evaluations']:4d}): "
            f"mse {row['mse']:.6f}  ssim {row['ssim']:.6f}"
        )
    return 0


def cmd_mask_sweep(args) -> int:
    cfg, out_dir = _load(args)
    directions = list(harness.MASK_DIRECTIONS) if args.direction == "both" else [args.direction]
    rows = harness.mask_sweep(cfg, out_dir, args.checkpoint, directions)
    for row in rows:
        print(
            f"{row['direction']}: masked {row['masked_frames']} -> "
            f"mse {row['mse']:.6f}  ssim {row['ssim']:.6f}"
        )
    return 0


def cmd_ablate(args) -> int:
    cfg, out_dir = _load(args)
    progress = None if args.quiet else _progress
    rows = harness.ablate(cfg, out_dir, progress=progress)
    width = max(len(r["variant"]) for r in rows)
    for row in rows:
        print(
            f"{row['variant']:<{width}}  val_mse {row['val_mse']:.6f}  "
            f"test_mse {row['test_mse']:.6f}  test_ssim {row['test_ssim']:.4f}"
        )
    return 0


def _fraction_cell(value: Fraction) -> str:
    scaled = value * BOARD * BOARD
    if scaled.denominator != 1:
        return str(value)
    return f"{scaled.numerator}/{BOARD * BOARD}"


def cmd_paradox(args) -> int:
    scene = build_scene()
    table = paradox_mse_table(scene)
    print(render_ascii(scene))
    print()
    print("exact MSE of each forecasting strategy:")
    for name in ("lci_mse", "difference_mse", "full_image_mse"):
        print(f"  {name:<16} {_fraction_cell(table[name])}")
    print()
    print(
        "a block-coarse model forecasting the change is exact, while the same\n"
        "model forecasting the full image scores worse than copying the last\n"
        "frame: pixel MSE rewards modeling the difference, not the image"
    )
    ok = table["difference_mse"] == 0 and table["lci_mse"] == Fraction(4, 64)
    return 0 if ok else 1


def cmd_report(args) -> int:
    if args.config:
        cfg, out_dir = _load(args)
    elif args.out:
        out_dir = args.out
    else:
        raise UsageError("report needs --out or --config to locate the run directory")
    history_path = os.path.join(out_dir, harness.HISTORY_NAME)
    if os.path.exists(history_path):
        from .training import load_history, select_best

        history = load_history(history_path)
        best = select_best([r.val_mse for r in history])
        print(
            f"{len(history)} epochs; best epoch {history[best].epoch} "
            f"(val_mse {history[best].val_mse:.6f}, val_ssim {history[best].val_ssim:.4f})"
        )
        plot_path = os.path.join(out_dir, "history.png")
        harness.plot_history(history_path, plot_path)
        print(f"history plot written to {plot_path}")
    else:
        print(f"no history at {history_path}")
    metrics_path = os.path.join(out_dir, "metrics.csv")
    if os.path.exists(metrics_path):
        from .metrics import read_metrics_csv

        samples, provenance = read_metrics_csv(metrics_path)
        labels = sorted({s.label for s in samples})
        for label in labels:
            rows = [s for s in samples if s.label == label]
            mean = sum(r.mse for r in rows) / len(rows)
            print(f"{label}: {len(rows)} samples, mean test mse {mean:.6f}")
        if provenance:
            print("provenance: " + ", ".join(f"{k}={v}" for k, v in sorted(provenance.items())))
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "nfe-sweep": cmd_nfe_sweep,
    "mask-sweep": cmd_mask_sweep,
    "ablate": cmd_ablate,
    "paradox": cmd_paradox,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.deterministic:
        import torch

        torch.use_deterministic_algorithms(True)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001  runtime failures map to exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
