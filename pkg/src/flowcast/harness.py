"""End-to-end experiment orchestration behind the CLI.

A run directory is fully reproducible from its config: cohort files,
mask sets, checkpoints, histories, and metric tables are deterministic
functions of the configuration, so re-running any stage yields identical
bytes. Stages materialize whatever inputs they are missing.
"""

from __future__ import annotations

import os
from dataclasses import replace
from typing import Callable, Sequence

import numpy as np

from .config import ExperimentConfig, save_config_echo
from .integrate import SolverConfig
from .metrics import (
    MetricsReport,
    mse,
    score_batch,
    ssim,
    write_metrics_csv,
    write_metrics_json,
)
from .model import VelocityUNet, load_checkpoint, save_checkpoint
from .sequences import ImageSequence, last_context_image, load_sequence, mask_sequence, save_sequence
from .synthetic import generate_sequence
from .training import (
    FitResult,
    MaskSet,
    generate_masks,
    load_masks,
    method_forecasts,
    fit,
    save_history,
    save_masks,
)

SPLITS = ("train", "val", "test")
MASK_DIRECTIONS = ("1toT", "Tto1")

CHECKPOINT_NAME = "checkpoint.pt"
HISTORY_NAME = "history.csv"


def _split_offsets(cfg: ExperimentConfig) -> dict[str, tuple[int, int]]:
    sizes = cfg.splits
    return {
        "train": (0, sizes.train),
        "val": (sizes.train, sizes.val),
        "test": (sizes.train + sizes.val, sizes.test),
    }


def split_dir(out_dir: str, split: str) -> str:
    return os.path.join(out_dir, "cohort", split)


def ensure_cohort(cfg: ExperimentConfig, out_dir: str) -> dict[str, int]:
    """Write any missing cohort files and mask sets; returns files per split.

    Generation is deterministic per patient index, so repeated calls (and
    repeated cmd_generate runs) produce byte-identical artifacts.
    """
    counts: dict[str, int] = {}
    for split, (offset, size) in _split_offsets(cfg).items():
        directory = split_dir(out_dir, split)
        os.makedirs(directory, exist_ok=True)
        written = 0
        for i in range(size):
            base = os.path.join(directory, f"seq_{i:04d}")
            if not (os.path.exists(base + ".raw") and os.path.exists(base + ".hdr")):
                save_sequence(generate_sequence(cfg.dataset, offset + i), base)
            written += 1
        counts[split] = written

    n_frames = cfg.dataset.shape.n_frames
    for split, seed, size in (
        ("val", cfg.masks.val_seed, cfg.splits.val),
        ("test", cfg.masks.test_seed, cfg.splits.test),
    ):
        path = os.path.join(out_dir, f"masks_{split}.json")
        if not os.path.exists(path):
            save_masks(generate_masks(size, n_frames, cfg.masks.mask_rate, seed), path)
    save_config_echo(cfg, os.path.join(out_dir, "config_echo.json"))
    return counts


def load_split(cfg: ExperimentConfig, out_dir: str, split: str) -> list[ImageSequence]:
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    _, size = _split_offsets(cfg)[split]
    directory = split_dir(out_dir, split)
    return [load_sequence(os.path.join(directory, f"seq_{i:04d}")) for i in range(size)]


def load_split_masks(cfg: ExperimentConfig, out_dir: str, split: str) -> MaskSet:
    return load_masks(os.path.join(out_dir, f"masks_{split}.json"))


def build_model(cfg: ExperimentConfig) -> VelocityUNet:
    shape = cfg.dataset.shape
    return VelocityUNet(cfg.model, shape.volume, seed=cfg.train.seed)


def run_training(
    cfg: ExperimentConfig,
    out_dir: str,
    *,
    progress: Callable | None = None,
) -> tuple[VelocityUNet, FitResult]:
    """Train per config, persist the best-validation checkpoint and history."""
    ensure_cohort(cfg, out_dir)
    train_seqs = load_split(cfg, out_dir, "train")
    val_seqs = load_split(cfg, out_dir, "val")
    val_masks = load_split_masks(cfg, out_dir, "val")

    model = build_model(cfg)
    result = fit(
        model,
        cfg.train,
        train_seqs,
        val_seqs,
        val_masks,
        cfg.solver,
        train_mask_rate=cfg.masks.mask_rate,
        progress=progress,
    )
    model.load_state_dict(result.best_state)
    model.eval()
    save_checkpoint(
        os.path.join(out_dir, CHECKPOINT_NAME),
        model,
        step=result.total_steps,
        extra={
            "config_hash": cfg.hash(),
            "best_epoch": result.best_epoch,
            "best_val_mse": result.best_val_mse,
        },
    )
    save_history(os.path.join(out_dir, HISTORY_NAME), result.history)
    save_masks(val_masks, os.path.join(out_dir, "masks.json"))
    return model, result


def load_run_checkpoint(
    cfg: ExperimentConfig, checkpoint_path: str
) -> tuple[VelocityUNet, dict]:
    """Load a checkpoint and refuse it when the config hash disagrees."""
    model, payload = load_checkpoint(checkpoint_path)
    stored = payload.get("extra", {}).get("config_hash")
    current = cfg.hash()
    if stored != current:
        raise RuntimeError(
            f"checkpoint {checkpoint_path} was trained under config hash {stored}, "
            f"but this config hashes to {current}; refusing to evaluate"
        )
    return model, payload


def evaluate(
    cfg: ExperimentConfig, out_dir: str, checkpoint_path: str | None = None
) -> MetricsReport:
    """Score the trained method and the copy-last-frame baseline on frozen test masks."""
    ensure_cohort(cfg, out_dir)
    if checkpoint_path is None:
        checkpoint_path = os.path.join(out_dir, CHECKPOINT_NAME)
    model, payload = load_run_checkpoint(cfg, checkpoint_path)
    test_seqs = load_split(cfg, out_dir, "test")
    test_masks = load_split_masks(cfg, out_dir, "test")
    masked = [mask_sequence(s, test_masks.keep[i]) for i, s in enumerate(test_seqs)]
    targets = [s.target for s in test_seqs]

    preds = method_forecasts(
        model, masked, cfg.solver,
        method=cfg.train.method, use_filling=cfg.train.sparsity_filling,
    )
    samples = score_batch(cfg.train.method, list(preds), targets)
    samples += score_batch("lci", [last_context_image(s) for s in masked], targets)

    report = MetricsReport(
        samples=tuple(samples),
        provenance={
            "config_hash": cfg.hash(),
            "checkpoint_step": payload["step"],
            "checkpoint_best_epoch": payload["extra"].get("best_epoch"),
            "mask_seed": test_masks.seed,
            "mask_rate": test_masks.mask_rate,
            "solver": f"{cfg.solver.method}/{cfg.solver.steps}/{cfg.solver.reduction}",
            "method": cfg.train.method,
        },
    )
    write_metrics_csv(report, os.path.join(out_dir, "metrics.csv"))
    write_metrics_json(report, os.path.join(out_dir, "metrics.json"))
    return report


def nfe_sweep(
    cfg: ExperimentConfig,
    out_dir: str,
    checkpoint_path: str | None = None,
    steps_list: Sequence[int] = (1, 5, 10, 25, 50, 100),
) -> list[dict]:
    """Forecast quality as a function of integration steps on the test split."""
    ensure_cohort(cfg, out_dir)
    if checkpoint_path is None:
        checkpoint_path = os.path.join(out_dir, CHECKPOINT_NAME)
    model, _ = load_run_checkpoint(cfg, checkpoint_path)
    test_seqs = load_split(cfg, out_dir, "test")
    test_masks = load_split_masks(cfg, out_dir, "test")
    masked = [mask_sequence(s, test_masks.keep[i]) for i, s in enumerate(test_seqs)]
    targets = [s.target for s in test_seqs]

    rows = []
    for steps in steps_list:
        solver = replace(cfg.solver, steps=int(steps))
        preds = method_forecasts(
            model, masked, solver,
            method=cfg.train.method, use_filling=cfg.train.sparsity_filling,
        )
        rows.append(
            {
                "steps": int(steps),
                "field_evaluations": solver.field_evaluations,
                "mse": float(np.mean([mse(p, t) for p, t in zip(preds, targets)])),
                "ssim": float(np.mean([ssim(p, t) for p, t in zip(preds, targets)])),
            }
        )
    _write_rows(os.path.join(out_dir, "nfe_sweep.csv"), rows)
    _plot_nfe(rows, os.path.join(out_dir, "nfe_sweep.png"))
    return rows


def directional_mask(n_frames: int, k: int, direction: str) -> np.ndarray:
    """Keep-mask removing the k earliest (1toT) or k latest (Tto1) frames."""
    if direction not in MASK_DIRECTIONS:
        raise ValueError(f"direction must be one of {MASK_DIRECTIONS}")
    if not 0 <= k < n_frames:
        raise ValueError(f"k must lie in [0, {n_frames}), got {k}")
    keep = np.ones(n_frames, dtype=bool)
    if direction == "1toT":
        keep[:k] = False
    else:
        keep[n_frames - k :] = False
    return keep


def mask_sweep(
    cfg: ExperimentConfig,
    out_dir: str,
    checkpoint_path: str | None = None,
    directions: Sequence[str] = MASK_DIRECTIONS,
) -> list[dict]:
    """Degradation curves when dropping k frames from either end of the context.

    Masks are applied to pristine test sequences, so k=0 is the full-context
    reference for both directions.
    """
    ensure_cohort(cfg, out_dir)
    if checkpoint_path is None:
        checkpoint_path = os.path.join(out_dir, CHECKPOINT_NAME)
    model, _ = load_run_checkpoint(cfg, checkpoint_path)
    test_seqs = load_split(cfg, out_dir, "test")
    targets = [s.target for s in test_seqs]
    n_frames = cfg.dataset.shape.n_frames

    rows = []
    for direction in directions:
        for k in range(n_frames):
            keep = directional_mask(n_frames, k, direction)
            masked = [mask_sequence(s, keep) for s in test_seqs]
            preds = method_forecasts(
                model, masked, cfg.solver,
                method=cfg.train.method, use_filling=cfg.train.sparsity_filling,
            )
            rows.append(
                {
                    "direction": direction,
                    "masked_frames": k,
                    "present_frames": n_frames - k,
                    "mse": float(np.mean([mse(p, t) for p, t in zip(preds, targets)])),
                    "ssim": float(np.mean([ssim(p, t) for p, t in zip(preds, targets)])),
                }
            )
    _write_rows(os.path.join(out_dir, "mask_sweep.csv"), rows)
    _plot_mask_sweep(rows, os.path.join(out_dir, "mask_sweep.png"))
    return rows


ABLATION_VARIANTS = ("default", "bottleneck_concat", "no_filling", "reduction_last", "lci_fm")


def _variant_config(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    if variant in ("default", "reduction_last"):
        return cfg
    if variant == "bottleneck_concat":
        return replace(cfg, model=replace(cfg.model, conditioning="bottleneck_concat"))
    if variant == "no_filling":
        return replace(cfg, train=replace(cfg.train, sparsity_filling=False))
    if variant == "lci_fm":
        return replace(
            cfg,
            train=replace(cfg.train, method="lci_fm"),
            model=replace(cfg.model, in_frames=1),
        )
    raise ValueError(f"unknown variant {variant!r}")


def ablate(
    cfg: ExperimentConfig, out_dir: str, *, progress: Callable | None = None
) -> list[dict]:
    """Train and score the conditioning/filling/reduction/context ablations.

    reduction_last reuses the default checkpoint and only changes how the
    transported frames are collapsed at inference, so five table rows come
    from four training runs.
    """
    ensure_cohort(cfg, out_dir)
    test_seqs = load_split(cfg, out_dir, "test")
    test_masks = load_split_masks(cfg, out_dir, "test")
    masked = [mask_sequence(s, test_masks.keep[i]) for i, s in enumerate(test_seqs)]
    targets = [s.target for s in test_seqs]

    trained: dict[str, tuple[VelocityUNet, FitResult, ExperimentConfig]] = {}
    rows = []
    for variant in ABLATION_VARIANTS:
        vcfg = _variant_config(cfg, variant)
        if variant == "reduction_last":
            model, result, vcfg = trained["default"]
            solver = replace(vcfg.solver, reduction="last")
        else:
            vdir = os.path.join(out_dir, "ablate", variant)
            os.makedirs(vdir, exist_ok=True)
            model, result = _train_variant(vcfg, out_dir, vdir, progress)
            trained[variant] = (model, result, vcfg)
            solver = vcfg.solver
        preds = method_forecasts(
            model, masked, solver,
            method=vcfg.train.method, use_filling=vcfg.train.sparsity_filling,
        )
        rows.append(
            {
                "variant": variant,
                "best_epoch": result.best_epoch,
                "val_mse": result.best_val_mse,
                "test_mse": float(np.mean([mse(p, t) for p, t in zip(preds, targets)])),
                "test_ssim": float(np.mean([ssim(p, t) for p, t in zip(preds, targets)])),
            }
        )
    _write_rows(os.path.join(out_dir, "ablation.csv"), rows)
    return rows


def _train_variant(
    vcfg: ExperimentConfig, data_dir: str, run_dir: str, progress: Callable | None
) -> tuple[VelocityUNet, FitResult]:
    train_seqs = load_split(vcfg, data_dir, "train")
    val_seqs = load_split(vcfg, data_dir, "val")
    val_masks = load_split_masks(vcfg, data_dir, "val")
    model = build_model(vcfg)
    result = fit(
        model, vcfg.train, train_seqs, val_seqs, val_masks, vcfg.solver,
        train_mask_rate=vcfg.masks.mask_rate, progress=progress,
    )
    model.load_state_dict(result.best_state)
    model.eval()
    save_checkpoint(
        os.path.join(run_dir, CHECKPOINT_NAME),
        model,
        step=result.total_steps,
        extra={"config_hash": vcfg.hash(), "best_epoch": result.best_epoch},
    )
    save_history(os.path.join(run_dir, HISTORY_NAME), result.history)
    return model, result


def _write_rows(path: str, rows: Sequence[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    keys = list(rows[0].keys())
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(keys) + "\n")
        for row in rows:
            fh.write(",".join(_cell(row[k]) for k in keys) + "\n")


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _plot_nfe(rows: Sequence[dict], path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [r["steps"] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    axes[0].plot(steps, [r["ssim"] for r in rows], marker="o")
    axes[0].set_xscale("log")
    axes[0].set_xlabel("integration steps")
    axes[0].set_ylabel("SSIM")
    axes[1].plot(steps, [r["mse"] for r in rows], marker="o", color="tab:red")
    axes[1].set_xscale("log")
    axes[1].set_xlabel("integration steps")
    axes[1].set_ylabel("MSE")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_mask_sweep(rows: Sequence[dict], path: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for direction in MASK_DIRECTIONS:
        sub = [r for r in rows if r["direction"] == direction]
        if not sub:
            continue
        label = "drop earliest first" if direction == "1toT" else "drop latest first"
        ax.plot([r["masked_frames"] for r in sub], [r["mse"] for r in sub], marker="o", label=label)
    ax.set_xlabel("masked frames")
    ax.set_ylabel("MSE")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_history(history_path: str, out_path: str) -> None:
    from .training import load_history

    history = load_history(history_path)
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [r.epoch for r in history]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    axes[0].plot(epochs, [r.train_loss for r in history])
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("train loss")
    axes[1].plot(epochs, [r.val_mse for r in history], color="tab:orange")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("val MSE")
    axes[2].plot(epochs, [r.lr for r in history], color="tab:green")
    axes[2].set_xlabel("epoch")
    axes[2].set_ylabel("learning rate")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
