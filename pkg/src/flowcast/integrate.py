"""Fixed-step ODE integration of the learned velocity field.

Integration runs over tau in [0, 1] with explicit Euler (steps function
evaluations) or classic RK4 (4x steps). The field is never evaluated
outside [0, 1]. After integration the T transported frames are collapsed
to a single forecast volume by temporal reduction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .sequences import ImageSequence, sparsity_fill

SOLVER_METHODS = ("euler", "rk4")
REDUCTIONS = ("mean", "last")


class IntegrationError(RuntimeError):
    """The state went non-finite; step_index points at the offending step."""

    def __init__(self, message: str, step_index: int):
        super().__init__(message)
        self.step_index = step_index


@dataclass(frozen=True)
class SolverConfig:
    method: str = "euler"
    steps: int = 10
    reduction: str = "mean"

    def __post_init__(self) -> None:
        if self.method not in SOLVER_METHODS:
            raise ValueError(f"method must be one of {SOLVER_METHODS}, got {self.method!r}")
        if self.steps < 1:
            raise ValueError(f"steps must be positive, got {self.steps}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")

    @property
    def field_evaluations(self) -> int:
        """Number of velocity-field evaluations the solve will perform."""
        return self.steps if self.method == "euler" else 4 * self.steps


def _all_finite(x) -> bool:
    if torch.is_tensor(x):
        return bool(torch.isfinite(x).all())
    # plain np.isfinite also covers the scalars that 0-dim states decay to
    return bool(np.isfinite(x).all())


def integrate(field: Callable, x0, cfg: SolverConfig):
    """Advance x0 from tau=0 to tau=1 under dx/dtau = field(x, tau).

    field receives the current state and a float tau in [0, 1]; the state
    keeps the array type of x0 (numpy or torch).
    """
    if not _all_finite(x0):
        raise IntegrationError("initial state contains non-finite values", -1)
    h = 1.0 / cfg.steps
    x = x0
    for k in range(cfg.steps):
        t = k * h
        if cfg.method == "euler":
            x = x + h * field(x, t)
        else:
            k1 = field(x, t)
            k2 = field(x + (h / 2) * k1, t + h / 2)
            k3 = field(x + (h / 2) * k2, t + h / 2)
            k4 = field(x + h * k3, t + h)
            x = x + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not _all_finite(x):
            raise IntegrationError(f"state went non-finite at step {k}", k)
    return x


def temporal_reduce(frames, reduction: str):
    """Collapse the frame axis of [..., T, D, H, W] to a single volume."""
    if reduction not in REDUCTIONS:
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    if frames.ndim < 4:
        raise ValueError(f"expected at least [T, D, H, W], got shape {tuple(frames.shape)}")
    if reduction == "mean":
        return frames.mean(-4)
    return frames[..., -1, :, :, :]


def predict_batch(
    model,
    sequences: Sequence[ImageSequence],
    solver: SolverConfig,
    *,
    use_filling: bool = True,
) -> np.ndarray:
    """Forecast target volumes for a batch of sequences; returns [N, D, H, W].

    The context stack is sparsity-filled (or left zero-filled when
    use_filling is False), transported to tau=1 under the model field, and
    temporally reduced.
    """
    if not sequences:
        raise ValueError("need at least one sequence")
    stacks = []
    for seq in sequences:
        stacks.append(sparsity_fill(seq).frames if use_filling else seq.frames)
    param = next(model.parameters())
    x0 = torch.as_tensor(np.stack(stacks), dtype=param.dtype, device=param.device)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            xhat = integrate(model, x0, solver)
            reduced = temporal_reduce(xhat, solver.reduction)
    finally:
        if was_training:
            model.train()
    return reduced.cpu().numpy()


def predict(
    model, seq: ImageSequence, solver: SolverConfig, *, use_filling: bool = True
) -> np.ndarray:
    """Forecast a single sequence's target volume; returns [D, H, W]."""
    return predict_batch(model, [seq], solver, use_filling=use_filling)[0]
