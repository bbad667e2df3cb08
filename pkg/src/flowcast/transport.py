"""Linear transport between context stacks and replicated targets.

The probability path is a straight line: X_tau = (1 - tau) X0 + tau X1,
whose velocity is the constant per-frame difference X1 - X0. These
functions accept numpy arrays or torch tensors; the loss keeps the input
type so it can sit inside an autograd graph.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np


def _all_finite(x) -> bool:
    if isinstance(x, np.ndarray):
        return bool(np.isfinite(x).all())
    return bool(x.isfinite().all())


def _tau_bounds(tau) -> tuple[float, float]:
    if isinstance(tau, (float, int)):
        return float(tau), float(tau)
    return float(tau.min()), float(tau.max())


def _pad_tau(tau, x):
    """Reshape a per-sample tau vector so it broadcasts over trailing axes."""
    if isinstance(tau, (float, int)):
        return float(tau)
    if tau.ndim == 0:
        return tau
    return tau.reshape(tau.shape[0], *([1] * (x.ndim - 1)))


@dataclass(frozen=True)
class FlowState:
    """A point on the transport path together with its position tau in [0, 1].

    For batched states tau may be a per-sample vector aligned with axis 0.
    """

    x_tau: Any
    tau: Any


def interpolate(x0, x1, tau) -> FlowState:
    """Evaluate the linear path at tau: (1 - tau) x0 + tau x1."""
    if x0.shape != x1.shape:
        raise ValueError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    if not (_all_finite(x0) and _all_finite(x1)):
        raise ValueError("endpoints contain non-finite values")
    lo, hi = _tau_bounds(tau)
    if not (0.0 <= lo and hi <= 1.0):
        raise ValueError(f"tau must lie in [0, 1], got range [{lo}, {hi}]")
    t = _pad_tau(tau, x0)
    return FlowState((1.0 - t) * x0 + t * x1, tau)


def true_velocity(x0, x1):
    """Velocity of the linear path, constant in tau: x1 - x0."""
    if x0.shape != x1.shape:
        raise ValueError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    return x1 - x0


def sample_fm_step(rng: np.random.Generator) -> float:
    """Draw the regression position tau uniformly from [0, 1)."""
    return float(rng.random())


def fm_loss(predicted, truth):
    """Mean squared error between predicted and true velocity fields.

    Returns a float for numpy inputs and a 0-dim tensor for torch inputs
    so it can be backpropagated.
    """
    if predicted.shape != truth.shape:
        raise ValueError(f"velocity shapes differ: {predicted.shape} vs {truth.shape}")
    if not (_all_finite(predicted) and _all_finite(truth)):
        raise ValueError("velocity fields contain non-finite values")
    diff = predicted - truth
    loss = (diff * diff).mean()
    if isinstance(loss, np.floating) or isinstance(predicted, np.ndarray):
        return float(loss)
    return loss
