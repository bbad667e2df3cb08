"""Training loop, masking protocols, and learning-rate schedule.

Three methods share one loop: "tfm" regresses the per-frame velocity from
the sparsity-filled context stack to the replicated target, "direct_baseline"
regresses the target volume itself from the same stack at tau=0, and
"lci_fm" runs flow matching from the single most recent frame.

Masking follows a fixed-mask protocol: training masks are redrawn per
sample each epoch from the training seed, while validation and test splits
use one frozen MaskSet apiece so that every epoch (and every re-run) is
scored against identical inputs.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .integrate import SolverConfig, integrate, predict_batch, temporal_reduce
from .metrics import mse, ssim
from .sequences import ImageSequence, last_context_image, mask_sequence, sparsity_fill
from .transport import fm_loss, interpolate, true_velocity

METHODS = ("tfm", "direct_baseline", "lci_fm")
LOSS_NORMS = ("mse", "l1")

MASKS_SCHEMA = "flowcast.masks.v1"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; defaults follow the reference recipe.

    AdamW with decoupled weight decay, per-step linear warmup from zero over
    warmup_fraction of all steps, then a cosine decay that reaches zero on
    the final step. Gradients are clipped to a global norm of grad_clip.
    """

    epochs: int = 500
    batch_size: int = 4
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    warmup_fraction: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    method: str = "tfm"
    sparsity_filling: bool = True
    loss_norm: str = "mse"

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in [0, 1)")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.loss_norm not in LOSS_NORMS:
            raise ValueError(f"loss_norm must be one of {LOSS_NORMS}, got {self.loss_norm!r}")


@dataclass(frozen=True)
class MaskSet:
    """Frozen per-sample presence masks; keep[i, j] True means frame j stays."""

    keep: np.ndarray
    seed: int
    mask_rate: float

    def __post_init__(self) -> None:
        keep = np.array(self.keep, dtype=bool, copy=True)
        keep.setflags(write=False)
        object.__setattr__(self, "keep", keep)
        if keep.ndim != 2:
            raise ValueError("keep must be [n_samples, n_frames]")
        if not keep.any(axis=1).all():
            raise ValueError("every sample must keep at least one frame")


def bernoulli_presence(n: int, n_frames: int, mask_rate: float, seed: int) -> np.ndarray:
    """Raw unrepaired draws: each frame kept independently with prob 1 - mask_rate."""
    if not 0.0 <= mask_rate <= 1.0:
        raise ValueError(f"mask_rate must lie in [0, 1], got {mask_rate}")
    rng = np.random.default_rng(seed)
    return rng.random((n, n_frames)) >= mask_rate


def generate_masks(n: int, n_frames: int, mask_rate: float, seed: int) -> MaskSet:
    """Frozen MaskSet for a split; all-masked draws keep the latest frame."""
    keep = bernoulli_presence(n, n_frames, mask_rate, seed)
    empty = ~keep.any(axis=1)
    keep[empty, n_frames - 1] = True
    return MaskSet(keep, seed, mask_rate)


def save_masks(masks: MaskSet, path: str) -> None:
    payload = {
        "schema": MASKS_SCHEMA,
        "seed": masks.seed,
        "mask_rate": masks.mask_rate,
        "keep": ["".join("1" if v else "0" for v in row) for row in masks.keep],
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_masks(path: str) -> MaskSet:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("schema") != MASKS_SCHEMA:
        raise ValueError(f"{path} is not a {MASKS_SCHEMA} file")
    keep = np.array([[ch == "1" for ch in row] for row in payload["keep"]], dtype=bool)
    return MaskSet(keep, int(payload["seed"]), float(payload["mask_rate"]))


def schedule_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from zero, then cosine decay hitting zero on the last step."""
    if total_steps < 1:
        raise ValueError("total_steps must be positive")
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warmup_steps = max(1, int(round(cfg.warmup_fraction * total_steps)))
    if step < warmup_steps:
        return cfg.learning_rate * step / warmup_steps
    span = total_steps - 1 - warmup_steps
    progress = (step - warmup_steps) / span if span > 0 else 1.0
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def _training_loss(pred: torch.Tensor, truth: torch.Tensor, loss_norm: str) -> torch.Tensor:
    if loss_norm == "mse":
        return fm_loss(pred, truth)
    return (pred - truth).abs().mean()


def _apply_update(model, optimizer, loss: torch.Tensor, *, lr: float, grad_clip: float) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise RuntimeError(f"training loss went non-finite: {value}")
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return value


def train_step_tfm(
    model,
    optimizer,
    x0: torch.Tensor,
    x1: torch.Tensor,
    rng: np.random.Generator,
    *,
    lr: float,
    grad_clip: float = 1.0,
    loss_norm: str = "mse",
) -> float:
    """One velocity-regression update; tau is drawn per sample from rng."""
    taus = torch.as_tensor(rng.random(x0.shape[0]), dtype=x0.dtype)
    state = interpolate(x0, x1, taus)
    truth = true_velocity(x0, x1)
    pred = model(state.x_tau, state.tau)
    loss = _training_loss(pred, truth, loss_norm)
    return _apply_update(model, optimizer, loss, lr=lr, grad_clip=grad_clip)


def train_step_baseline(
    model,
    optimizer,
    context: torch.Tensor,
    target: torch.Tensor,
    *,
    lr: float,
    grad_clip: float = 1.0,
    loss_norm: str = "mse",
) -> float:
    """One direct-regression update: mean of the frame-wise outputs vs the target."""
    pred = temporal_reduce(model(context, 0.0), "mean")
    loss = _training_loss(pred, target, loss_norm)
    return _apply_update(model, optimizer, loss, lr=lr, grad_clip=grad_clip)


def train_step_lci_fm(
    model,
    optimizer,
    lci: torch.Tensor,
    target: torch.Tensor,
    rng: np.random.Generator,
    *,
    lr: float,
    grad_clip: float = 1.0,
    loss_norm: str = "mse",
) -> float:
    """Flow matching from the most recent frame alone: the T=1 special case."""
    return train_step_tfm(
        model,
        optimizer,
        lci.unsqueeze(1),
        target.unsqueeze(1),
        rng,
        lr=lr,
        grad_clip=grad_clip,
        loss_norm=loss_norm,
    )


def _draw_keep(rng: np.random.Generator, n: int, n_frames: int, mask_rate: float) -> np.ndarray:
    keep = rng.random((n, n_frames)) >= mask_rate
    empty = ~keep.any(axis=1)
    keep[empty, n_frames - 1] = True
    return keep


def _context_stack(seq: ImageSequence, use_filling: bool) -> np.ndarray:
    return sparsity_fill(seq).frames if use_filling else seq.frames


def method_forecasts(
    model,
    sequences: Sequence[ImageSequence],
    solver: SolverConfig,
    *,
    method: str = "tfm",
    use_filling: bool = True,
) -> np.ndarray:
    """Forecast volumes [N, D, H, W] for any training method."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    if method == "tfm":
        return predict_batch(model, sequences, solver, use_filling=use_filling)
    param = next(model.parameters())
    if method == "direct_baseline":
        stacks = np.stack([_context_stack(s, use_filling) for s in sequences])
        x = torch.as_tensor(stacks, dtype=param.dtype, device=param.device)
        with torch.no_grad():
            out = temporal_reduce(model(x, 0.0), "mean")
        return out.cpu().numpy()
    lci = np.stack([last_context_image(s)[None] for s in sequences])
    x0 = torch.as_tensor(lci, dtype=param.dtype, device=param.device)
    with torch.no_grad():
        xhat = integrate(model, x0, solver)
        out = temporal_reduce(xhat, solver.reduction)
    return out.cpu().numpy()


def validation_scores(
    model,
    masked_sequences: Sequence[ImageSequence],
    solver: SolverConfig,
    *,
    method: str = "tfm",
    use_filling: bool = True,
) -> tuple[float, float]:
    """Mean MSE and SSIM of forecasts against the held-out targets."""
    preds = method_forecasts(
        model, masked_sequences, solver, method=method, use_filling=use_filling
    )
    mses = [mse(p, s.target) for p, s in zip(preds, masked_sequences)]
    ssims = [ssim(p, s.target) for p, s in zip(preds, masked_sequences)]
    return float(np.mean(mses)), float(np.mean(ssims))


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_mse: float
    val_ssim: float
    lr: float


@dataclass
class FitResult:
    best_epoch: int
    best_val_mse: float
    best_state: dict
    history: list[EpochRecord] = field(default_factory=list)
    total_steps: int = 0


def select_best(val_mses: Sequence[float]) -> int:
    """Index of the lowest validation MSE; ties go to the earliest epoch."""
    if len(val_mses) == 0:
        raise ValueError("no epochs to select from")
    return int(np.argmin(np.asarray(val_mses)))


def fit(
    model,
    cfg: TrainConfig,
    train_seqs: Sequence[ImageSequence],
    val_seqs: Sequence[ImageSequence],
    val_masks: MaskSet,
    solver: SolverConfig,
    *,
    train_mask_rate: float = 0.0,
    progress: Callable[[EpochRecord], None] | None = None,
) -> FitResult:
    """Train a model and return the best-validation checkpoint state.

    Training masks are redrawn per (sample, epoch); validation inputs are
    masked once with the frozen val_masks and reused every epoch, so the
    selection criterion is a pure function of the parameters.
    """
    if len(train_seqs) == 0 or len(val_seqs) == 0:
        raise ValueError("need non-empty train and validation splits")
    if val_masks.keep.shape[0] != len(val_seqs):
        raise ValueError(
            f"val_masks cover {val_masks.keep.shape[0]} samples, split has {len(val_seqs)}"
        )
    n = len(train_seqs)
    n_frames = train_seqs[0].frames.shape[0]
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    torch.manual_seed(cfg.seed)
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    val_masked = [mask_sequence(s, val_masks.keep[i]) for i, s in enumerate(val_seqs)]

    history: list[EpochRecord] = []
    best_epoch = -1
    best_val = math.inf
    best_state: dict = {}
    global_step = 0

    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, epoch]))
        order = rng.permutation(n)
        keep = _draw_keep(rng, n, n_frames, train_mask_rate)

        model.train()
        epoch_losses = []
        last_lr = 0.0
        for start in range(0, n, cfg.batch_size):
            batch_idx = order[start : start + cfg.batch_size]
            lr = schedule_lr(global_step, total_steps, cfg)
            last_lr = lr
            try:
                loss = _run_step(
                    model, optimizer, cfg, train_seqs, batch_idx, keep, rng, lr
                )
            except (RuntimeError, ValueError) as exc:
                raise RuntimeError(
                    f"aborting at epoch {epoch}, step {global_step}: {exc}"
                ) from exc
            epoch_losses.append(loss)
            global_step += 1

        model.eval()
        val_mse, val_ssim = validation_scores(
            model, val_masked, solver, method=cfg.method, use_filling=cfg.sparsity_filling
        )
        record = EpochRecord(epoch, float(np.mean(epoch_losses)), val_mse, val_ssim, last_lr)
        history.append(record)
        if progress is not None:
            progress(record)
        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    return FitResult(best_epoch, best_val, best_state, history, total_steps)


def _run_step(
    model,
    optimizer,
    cfg: TrainConfig,
    train_seqs: Sequence[ImageSequence],
    batch_idx: np.ndarray,
    keep: np.ndarray,
    rng: np.random.Generator,
    lr: float,
) -> float:
    param = next(model.parameters())
    masked = [mask_sequence(train_seqs[i], keep[i]) for i in batch_idx]
    targets = np.stack([s.target for s in masked])
    target_t = torch.as_tensor(targets, dtype=param.dtype, device=param.device)

    if cfg.method == "lci_fm":
        lci = np.stack([last_context_image(s) for s in masked])
        lci_t = torch.as_tensor(lci, dtype=param.dtype, device=param.device)
        return train_step_lci_fm(
            model, optimizer, lci_t, target_t, rng,
            lr=lr, grad_clip=cfg.grad_clip, loss_norm=cfg.loss_norm,
        )

    stacks = np.stack([_context_stack(s, cfg.sparsity_filling) for s in masked])
    x0 = torch.as_tensor(stacks, dtype=param.dtype, device=param.device)
    if cfg.method == "direct_baseline":
        return train_step_baseline(
            model, optimizer, x0, target_t,
            lr=lr, grad_clip=cfg.grad_clip, loss_norm=cfg.loss_norm,
        )
    # target replicated across the T frame slots
    x1 = target_t.unsqueeze(1).expand(-1, x0.shape[1], -1, -1, -1)
    return train_step_tfm(
        model, optimizer, x0, x1, rng,
        lr=lr, grad_clip=cfg.grad_clip, loss_norm=cfg.loss_norm,
    )


def save_history(path: str, history: Sequence[EpochRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,train_loss,val_mse,val_ssim,lr\n")
        for r in history:
            fh.write(f"{r.epoch},{r.train_loss!r},{r.val_mse!r},{r.val_ssim!r},{r.lr!r}\n")


def load_history(path: str) -> list[EpochRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "epoch,train_loss,val_mse,val_ssim,lr":
            raise ValueError(f"{path} is not a history file")
        for line in fh:
            if not line.strip():
                continue
            e, tl, vm, vs, lr = line.strip().split(",")
            records.append(EpochRecord(int(e), float(tl), float(vm), float(vs), float(lr)))
    return records
