"""Deterministic synthetic cohorts of evolving 3D volumes.

Each patient is a smooth 2D dynamic scene extruded along the depth axis,
sampled at irregular times and corrupted with truncated Gaussian noise.
All per-patient randomness derives from (seed, kind, patient, stream), so
any frame, the acquisition times, and the noise-free oracle volume can be
re-derived independently of cohort size or generation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .sequences import ImageSequence, SequenceShape, last_context_image
from .metrics import nrmse

KINDS = ("pulsating_ellipse", "growing_disk", "drifting_texture")

# rng stream tags so oracle rendering never consumes noise-stream state
_STREAM_PARAMS = 0
_STREAM_TIMES = 1
_STREAM_NOISE = 2

_EDGE_WIDTH = 1.5  # linear intensity ramp width at structure boundaries, px
_TIME_JITTER = 0.3  # fraction of the nominal grid spacing
_NOISE_CLIP_SIGMAS = 4.0
_TEXTURE_BLOBS = 5


@dataclass(frozen=True)
class DynamicsSpec:
    """Recipe for one synthetic cohort.

    growth_rate is in pixels per unit time (growing_disk), amplitude is the
    relative pulsation of the ellipse axes, drift is (dy, dx) pixels per unit
    time for the texture constellation. Context times live in [0, 1) and the
    target is always at time 1.0.
    """

    kind: str
    shape: SequenceShape
    amplitude: float = 0.15
    growth_rate: float = 5.0
    drift: tuple[float, float] = (3.0, 2.0)
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not isinstance(self.shape, SequenceShape):
            raise ValueError("shape must be a SequenceShape")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        object.__setattr__(self, "drift", tuple(float(v) for v in self.drift))
        if len(self.drift) != 2:
            raise ValueError("drift must be (dy, dx)")
        _validate_bounds(self)


def _validate_bounds(spec: DynamicsSpec) -> None:
    """Reject parameter combinations whose structures could leave the field of view
    or whose noise could push intensities outside [0, 1]."""
    h, w = spec.shape.height, spec.shape.width
    m = min(h, w)
    headroom = 4 * spec.noise_sigma
    if spec.kind == "growing_disk":
        if spec.growth_rate < 0:
            raise ValueError("growth_rate must be non-negative")
        r_max = 0.20 * m + spec.growth_rate
        for extent in (h, w):
            if 0.08 * extent + r_max + _EDGE_WIDTH / 2 > extent / 2 - 1:
                raise ValueError(
                    f"growing_disk leaves the field of view: growth_rate={spec.growth_rate} "
                    f"too large for extent {extent}"
                )
        lo, hi = 0.10, 0.85
    elif spec.kind == "pulsating_ellipse":
        if not 0 <= spec.amplitude < 1:
            raise ValueError("amplitude must lie in [0, 1)")
        for extent in (h, w):
            a_max = 0.24 * extent * (1 + spec.amplitude)
            if 0.06 * extent + a_max + _EDGE_WIDTH / 2 > extent / 2 - 1:
                raise ValueError(
                    f"pulsating_ellipse leaves the field of view: amplitude={spec.amplitude} "
                    f"too large for extent {extent}"
                )
        lo, hi = 0.10, 0.85
    else:
        dy, dx = spec.drift
        if abs(dy) * 1.15 > 0.20 * h or abs(dx) * 1.15 > 0.20 * w:
            raise ValueError(f"drifting_texture leaves the field of view: drift={spec.drift}")
        lo, hi = 0.08, 0.88
    if lo - headroom < 0 or hi + headroom > 1:
        raise ValueError(
            f"noise_sigma={spec.noise_sigma} can push {spec.kind} intensities outside [0, 1]"
        )


def _rng(spec: DynamicsSpec, patient: int, stream: int) -> np.random.Generator:
    kind_tag = KINDS.index(spec.kind)
    return np.random.default_rng(
        np.random.SeedSequence([spec.seed, kind_tag, int(patient), stream])
    )


def _patient_params(spec: DynamicsSpec, patient: int) -> dict:
    """Draw per-patient scene parameters; the draw order is part of the format."""
    rng = _rng(spec, patient, _STREAM_PARAMS)
    h, w = spec.shape.height, spec.shape.width
    m = min(h, w)
    if spec.kind == "growing_disk":
        u = rng.random(5)
        return {
            "cy": h / 2 + (u[0] - 0.5) * 0.16 * h,
            "cx": w / 2 + (u[1] - 0.5) * 0.16 * w,
            "r0": (0.16 + 0.04 * u[2]) * m,
            "fg": 0.75 + 0.10 * u[3],
            "bg": 0.10 + 0.03 * u[4],
        }
    if spec.kind == "pulsating_ellipse":
        u = rng.random(7)
        return {
            "cy": h / 2 + (u[0] - 0.5) * 0.12 * h,
            "cx": w / 2 + (u[1] - 0.5) * 0.12 * w,
            "a0": (0.18 + 0.06 * u[2]) * h,
            "b0": (0.18 + 0.06 * u[3]) * w,
            "phase": 2 * math.pi * u[4],
            "fg": 0.75 + 0.10 * u[5],
            "bg": 0.10 + 0.03 * u[6],
        }
    u = rng.random((_TEXTURE_BLOBS, 4))
    v = rng.random(3)
    dy, dx = spec.drift
    return {
        "centers_y": 0.30 * h + u[:, 0] * 0.40 * h,
        "centers_x": 0.30 * w + u[:, 1] * 0.40 * w,
        "widths": (0.05 + 0.05 * u[:, 2]) * m,
        "amps": 0.35 + 0.45 * u[:, 3],
        "vy": dy * (0.85 + 0.30 * v[0]),
        "vx": dx * (0.85 + 0.30 * v[1]),
        "bg": 0.08 + 0.02 * v[2],
    }


def _soft_step(signed_distance: np.ndarray, width: float) -> np.ndarray:
    """1 well inside the structure, 0 well outside, linear ramp of the given width."""
    return np.clip(signed_distance / width + 0.5, 0.0, 1.0)


def _grid(h: int, w: int, oversample: int = 1) -> tuple[np.ndarray, np.ndarray]:
    ys = (np.arange(h * oversample, dtype=np.float64) + 0.5) / oversample - 0.5
    xs = (np.arange(w * oversample, dtype=np.float64) + 0.5) / oversample - 0.5
    return ys[:, None], xs[None, :]


def _texture_sum(params: dict, yy: np.ndarray, xx: np.ndarray, time: float) -> np.ndarray:
    out = np.zeros(np.broadcast_shapes(yy.shape, xx.shape), dtype=np.float64)
    for cy, cx, width, amp in zip(
        params["centers_y"], params["centers_x"], params["widths"], params["amps"]
    ):
        dy = yy - (cy + params["vy"] * time)
        dx = xx - (cx + params["vx"] * time)
        out += amp * np.exp(-(dy * dy + dx * dx) / (2 * width * width))
    return out


def _texture_peak(params: dict, h: int, w: int) -> float:
    # translation-invariant in time, so one oversampled rendering bounds all times
    yy, xx = _grid(h, w, oversample=4)
    return float(_texture_sum(params, yy, xx, 0.0).max()) * 1.02


def render_plane(spec: DynamicsSpec, params: dict, time: float) -> np.ndarray:
    """Noise-free [H, W] scene at an arbitrary continuous time."""
    h, w = spec.shape.height, spec.shape.width
    yy, xx = _grid(h, w)
    if spec.kind == "growing_disk":
        radius = params["r0"] + spec.growth_rate * time
        dist = np.sqrt((yy - params["cy"]) ** 2 + (xx - params["cx"]) ** 2)
        inside = _soft_step(radius - dist, _EDGE_WIDTH)
        return params["bg"] + (params["fg"] - params["bg"]) * inside
    if spec.kind == "pulsating_ellipse":
        a = params["a0"] * (1 + spec.amplitude * math.sin(2 * math.pi * time + params["phase"]))
        b = params["b0"] * (
            1 + spec.amplitude * math.sin(2 * math.pi * time + params["phase"] + math.pi / 2)
        )
        dist = np.sqrt(((yy - params["cy"]) / a) ** 2 + ((xx - params["cx"]) / b) ** 2)
        inside = _soft_step((1.0 - dist) * min(a, b), _EDGE_WIDTH)
        return params["bg"] + (params["fg"] - params["bg"]) * inside
    peak = _texture_peak(params, h, w)
    field = _texture_sum(params, *_grid(h, w), time) / peak
    return params["bg"] + (0.88 - params["bg"]) * field


def oracle_target(spec: DynamicsSpec, patient: int, time: float) -> np.ndarray:
    """Noise-free ground-truth volume for one patient at any time; the ideal forecast."""
    params = _patient_params(spec, patient)
    plane = render_plane(spec, params, float(time)).astype(np.float32)
    return np.broadcast_to(plane, spec.shape.volume).copy()


def patient_times(spec: DynamicsSpec, patient: int) -> tuple[np.ndarray, float]:
    """Irregular context times in [0, 1) plus the target time 1.0.

    Times sit on a uniform grid of spacing 1/T jittered by +-30% of the
    spacing (the first time only forward, to stay non-negative).
    """
    t = spec.shape.n_frames
    spacing = 1.0 / t
    u = _rng(spec, patient, _STREAM_TIMES).random(t)
    times = np.empty(t, dtype=np.float64)
    times[0] = _TIME_JITTER * u[0] * spacing
    for i in range(1, t):
        times[i] = (i + _TIME_JITTER * (2 * u[i] - 1)) * spacing
    return times, 1.0


def generate_sequence(spec: DynamicsSpec, patient: int) -> ImageSequence:
    """One fully present patient sequence with noisy frames and target."""
    t = spec.shape.n_frames
    params = _patient_params(spec, patient)
    times, target_time = patient_times(spec, patient)
    clip = _NOISE_CLIP_SIGMAS * spec.noise_sigma
    noise = _rng(spec, patient, _STREAM_NOISE).normal(
        0.0, spec.noise_sigma, size=(t + 1, *spec.shape.volume)
    )
    if clip > 0:
        np.clip(noise, -clip, clip, out=noise)
    frames = np.empty(spec.shape.frames, dtype=np.float32)
    for i in range(t):
        plane = render_plane(spec, params, times[i])
        frames[i] = np.broadcast_to(plane, spec.shape.volume) + noise[i]
    plane = render_plane(spec, params, target_time)
    target = (np.broadcast_to(plane, spec.shape.volume) + noise[t]).astype(np.float32)
    presence = np.ones(t, dtype=bool)
    return ImageSequence(frames, presence, times, target, target_time)


def generate_cohort(spec: DynamicsSpec, n: int) -> list[ImageSequence]:
    """Patients 0..n-1; a prefix of any larger cohort with the same spec."""
    if n < 1:
        raise ValueError("cohort size must be positive")
    return [generate_sequence(spec, p) for p in range(n)]


def noise_floor(spec: DynamicsSpec, patients: Sequence[int]) -> float:
    """Mean squared error between noisy targets and their noise-free oracles.

    This is the irreducible test error of a perfect forecaster.
    """
    if len(patients) == 0:
        raise ValueError("need at least one patient")
    total = 0.0
    for p in patients:
        seq = generate_sequence(spec, p)
        oracle = oracle_target(spec, p, seq.target_time)
        diff = seq.target.astype(np.float64) - oracle.astype(np.float64)
        total += float((diff * diff).mean())
    return total / len(patients)


@dataclass(frozen=True)
class StaticBiasReport:
    """How far a no-change forecast sits from chance on a cohort.

    lci_nrmse: per-patient NRMSE of forecasting the last acquired frame.
    paired_nrmse: per-patient NRMSE of forecasting another patient's target.
    ratio close to 0 means the sequence's own last frame is already nearly
    the answer; close to 1 means it is no better than a random patient.
    """

    lci_nrmse: tuple[float, ...]
    paired_nrmse: tuple[float, ...]
    lci_mean: float
    paired_mean: float
    ratio: float


def static_bias_report(cohort: Sequence[ImageSequence], pairing_offset: int = 1) -> StaticBiasReport:
    n = len(cohort)
    if n < 2:
        raise ValueError("static bias needs at least two patients")
    if pairing_offset % n == 0:
        raise ValueError("pairing_offset must not map a patient to itself")
    lci_scores = tuple(
        nrmse(last_context_image(seq), seq.target) for seq in cohort
    )
    paired_scores = tuple(
        nrmse(cohort[(i + pairing_offset) % n].target, cohort[i].target) for i in range(n)
    )
    lci_mean = float(np.mean(lci_scores))
    paired_mean = float(np.mean(paired_scores))
    if paired_mean == 0.0:
        ratio = 0.0 if lci_mean == 0.0 else math.inf
    else:
        ratio = lci_mean / paired_mean
    return StaticBiasReport(lci_scores, paired_scores, lci_mean, paired_mean, ratio)
