"""Containers and I/O for sparse longitudinal volume sequences.

A sequence holds T context slots of [D, H, W] volumes, a presence mask
marking which slots were actually acquired, per-slot acquisition times,
and the future target volume the model must predict. Absent slots are
all-zero until sparsity filling replaces them with the most recent
acquired frame.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

INTENSITY_TOL = 1e-6

HEADER_SUFFIX = ".hdr"
PAYLOAD_SUFFIX = ".raw"
FORMAT_VERSION = "1"
PAYLOAD_DTYPE = np.dtype("<f4")


class SequenceIOError(Exception):
    """Base class for sequence file errors."""


class SequenceFormatError(SequenceIOError):
    """Header is malformed: bad version line, unknown or missing keys."""


class SequenceTruncatedError(SequenceIOError):
    """Payload size does not match the extents promised by the header."""


class SequenceShapeError(SequenceIOError):
    """Header fields are internally inconsistent (extents, presence, times)."""


@dataclass(frozen=True)
class SequenceShape:
    """Extents of a sequence: context slots and volume dimensions."""

    n_frames: int
    depth: int
    height: int
    width: int

    def __post_init__(self) -> None:
        for name in ("n_frames", "depth", "height", "width"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")

    @property
    def volume(self) -> tuple[int, int, int]:
        return (self.depth, self.height, self.width)

    @property
    def frames(self) -> tuple[int, int, int, int]:
        return (self.n_frames, self.depth, self.height, self.width)


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_intensities(name: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < -INTENSITY_TOL or hi > 1.0 + INTENSITY_TOL:
        raise ValueError(f"{name} intensities outside [0, 1]: min={lo}, max={hi}")


@dataclass(frozen=True)
class ImageSequence:
    """A sparse context sequence plus its prediction target.

    frames: [T, D, H, W] float32, all-zero wherever presence is False.
    presence: [T] bool, at least one True.
    times: [T] float64 acquisition times, strictly increasing on present slots.
    target: [D, H, W] float32 future volume.
    target_time: acquisition time of the target, >= every present time.
    """

    frames: np.ndarray
    presence: np.ndarray
    times: np.ndarray
    target: np.ndarray
    target_time: float

    def __post_init__(self) -> None:
        frames = _frozen_array(self.frames, np.float32)
        presence = _frozen_array(self.presence, bool)
        times = _frozen_array(self.times, np.float64)
        target = _frozen_array(self.target, np.float32)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "presence", presence)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "target_time", float(self.target_time))

        if frames.ndim != 4:
            raise ValueError(f"frames must be [T, D, H, W], got shape {frames.shape}")
        t = frames.shape[0]
        if presence.shape != (t,):
            raise ValueError(f"presence must have shape ({t},), got {presence.shape}")
        if times.shape != (t,):
            raise ValueError(f"times must have shape ({t},), got {times.shape}")
        if target.shape != frames.shape[1:]:
            raise ValueError(
                f"target shape {target.shape} does not match frame shape {frames.shape[1:]}"
            )
        if not presence.any():
            raise ValueError("sequence must contain at least one present frame")
        if frames[~presence].any():
            raise ValueError("absent slots must be all-zero before filling")
        if not np.isfinite(times).all():
            raise ValueError("times contain non-finite values")
        present_times = times[presence]
        if present_times.size > 1 and not (np.diff(present_times) > 0).all():
            raise ValueError("times must be strictly increasing on present slots")
        if self.target_time < float(present_times.max()):
            raise ValueError("target_time must not precede the latest present frame")
        _check_intensities("frames", frames)
        _check_intensities("target", target)

    @property
    def shape(self) -> SequenceShape:
        t, d, h, w = self.frames.shape
        return SequenceShape(t, d, h, w)


@dataclass(frozen=True)
class FilledSequence:
    """Dense context stack produced by sparsity filling.

    fill_source[i] is the index of the present frame that slot i carries.
    """

    frames: np.ndarray
    fill_source: np.ndarray

    def __post_init__(self) -> None:
        frames = _frozen_array(self.frames, np.float32)
        fill_source = _frozen_array(self.fill_source, np.int64)
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "fill_source", fill_source)
        if frames.ndim != 4:
            raise ValueError(f"frames must be [T, D, H, W], got shape {frames.shape}")
        t = frames.shape[0]
        if fill_source.shape != (t,):
            raise ValueError(f"fill_source must have shape ({t},), got {fill_source.shape}")
        if ((fill_source < 0) | (fill_source >= t)).any():
            raise ValueError("fill_source entries must index a context slot")


@dataclass(frozen=True)
class PairedFlowEndpoints:
    """Endpoints of the per-frame transport problem: context stack and replicated target."""

    x0: np.ndarray
    x1: np.ndarray

    def __post_init__(self) -> None:
        x0 = _frozen_array(self.x0, np.float32)
        x1 = _frozen_array(self.x1, np.float32)
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "x1", x1)
        if x0.shape != x1.shape:
            raise ValueError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
        if x0.ndim != 4:
            raise ValueError(f"endpoints must be [T, D, H, W], got shape {x0.shape}")


def zero_fill(
    entries: Iterable[tuple[int, np.ndarray]],
    shape: SequenceShape,
    *,
    times: Sequence[float] | None = None,
    target: np.ndarray | None = None,
    target_time: float | None = None,
) -> ImageSequence:
    """Place acquired volumes into a fixed-length slot grid, zeroing absent slots.

    entries: (slot index, volume) pairs; indices must be unique and in range.
    times defaults to the slot indices, target to zeros, target_time to n_frames.
    """
    frames = np.zeros(shape.frames, dtype=np.float32)
    presence = np.zeros(shape.n_frames, dtype=bool)
    for index, volume in entries:
        if not 0 <= index < shape.n_frames:
            raise ValueError(f"slot index {index} outside [0, {shape.n_frames})")
        if presence[index]:
            raise ValueError(f"duplicate slot index {index}")
        volume = np.asarray(volume, dtype=np.float32)
        if volume.shape != shape.volume:
            raise ValueError(
                f"volume for slot {index} has shape {volume.shape}, expected {shape.volume}"
            )
        frames[index] = volume
        presence[index] = True
    if times is None:
        times = np.arange(shape.n_frames, dtype=np.float64)
    if target is None:
        target = np.zeros(shape.volume, dtype=np.float32)
    if target_time is None:
        target_time = float(shape.n_frames)
    return ImageSequence(frames, presence, times, target, target_time)


def sparsity_fill(seq: ImageSequence) -> FilledSequence:
    """Forward-fill absent slots from the most recent present frame.

    Slots before the first acquisition borrow the earliest present frame.
    Present slots are carried over bit-exactly.
    """
    t = seq.frames.shape[0]
    fill_source = np.empty(t, dtype=np.int64)
    last = -1
    for i in range(t):
        if seq.presence[i]:
            last = i
        fill_source[i] = last
    earliest = int(np.argmax(seq.presence))
    fill_source[fill_source < 0] = earliest
    return FilledSequence(seq.frames[fill_source], fill_source)


def replicate_target(seq: ImageSequence | FilledSequence, target: np.ndarray | None = None) -> PairedFlowEndpoints:
    """Pair a context stack with the target replicated across all T slots."""
    frames = seq.frames
    if target is None:
        if not isinstance(seq, ImageSequence):
            raise ValueError("target must be given explicitly for a FilledSequence")
        target = seq.target
    target = np.asarray(target, dtype=np.float32)
    if target.shape != frames.shape[1:]:
        raise ValueError(
            f"target shape {target.shape} does not match frame shape {frames.shape[1:]}"
        )
    x1 = np.broadcast_to(target, frames.shape)
    return PairedFlowEndpoints(frames, x1)


def last_context_image(seq: ImageSequence) -> np.ndarray:
    """The most recently acquired frame; the classical static forecast."""
    if not seq.presence.any():
        raise ValueError("sequence has no present frames")
    last = int(np.flatnonzero(seq.presence)[-1])
    return seq.frames[last].copy()


def mask_sequence(seq: ImageSequence, keep: np.ndarray) -> ImageSequence:
    """Drop frames where keep is False, zeroing them and clearing presence."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != seq.presence.shape:
        raise ValueError(f"keep must have shape {seq.presence.shape}, got {keep.shape}")
    presence = seq.presence & keep
    if not presence.any():
        raise ValueError("mask would remove every present frame")
    frames = np.where(presence[:, None, None, None], seq.frames, 0.0).astype(np.float32)
    return ImageSequence(frames, presence, seq.times, seq.target, seq.target_time)


def normalize_intensities(
    frames: np.ndarray, target: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Jointly min-max normalize a raw sequence and its target to [0, 1].

    A constant sequence maps to all zeros.
    """
    frames = np.asarray(frames, dtype=np.float32)
    target = np.asarray(target, dtype=np.float32)
    lo = min(float(frames.min()), float(target.min()))
    hi = max(float(frames.max()), float(target.max()))
    span = hi - lo
    if span <= 0.0:
        return np.zeros_like(frames), np.zeros_like(target)
    return (frames - lo) / span, (target - lo) / span


def _format_floats(values: np.ndarray) -> str:
    return ",".join(repr(float(v)) for v in values)


def _strip_suffix(path: str) -> str:
    for suffix in (PAYLOAD_SUFFIX, HEADER_SUFFIX):
        if path.endswith(suffix):
            return path[: -len(suffix)]
    return path


def save_sequence(seq: ImageSequence, path: str | os.PathLike) -> None:
    """Write <path>.raw (float32 LE frames then target, C order) and <path>.hdr."""
    base = _strip_suffix(os.fspath(path))
    t, d, h, w = seq.frames.shape
    lines = [
        f"version={FORMAT_VERSION}",
        "dtype=f32le",
        f"T={t}",
        f"D={d}",
        f"H={h}",
        f"W={w}",
        "presence=" + ",".join("1" if p else "0" for p in seq.presence),
        "times=" + _format_floats(seq.times),
        f"target_time={float(seq.target_time)!r}",
    ]
    with open(base + HEADER_SUFFIX, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(base + PAYLOAD_SUFFIX, "wb") as fh:
        fh.write(np.ascontiguousarray(seq.frames, dtype=PAYLOAD_DTYPE).tobytes())
        fh.write(np.ascontiguousarray(seq.target, dtype=PAYLOAD_DTYPE).tobytes())


_HEADER_KEYS = ("version", "dtype", "T", "D", "H", "W", "presence", "times", "target_time")


def _parse_header(path: str) -> dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw_lines = fh.read().splitlines()
    except OSError as exc:
        raise SequenceFormatError(f"cannot read header {path}: {exc}") from exc
    lines = [line for line in raw_lines if line.strip()]
    if not lines or lines[0] != f"version={FORMAT_VERSION}":
        raise SequenceFormatError(f"{path}: first header line must be version={FORMAT_VERSION}")
    fields: dict[str, str] = {}
    for line in lines:
        key, sep, value = line.partition("=")
        if not sep:
            raise SequenceFormatError(f"{path}: malformed header line {line!r}")
        if key not in _HEADER_KEYS:
            raise SequenceFormatError(f"{path}: unknown header key {key!r}")
        if key in fields:
            raise SequenceFormatError(f"{path}: duplicate header key {key!r}")
        fields[key] = value
    missing = [key for key in _HEADER_KEYS if key not in fields]
    if missing:
        raise SequenceFormatError(f"{path}: missing header keys {missing}")
    if fields["dtype"] != "f32le":
        raise SequenceFormatError(f"{path}: unsupported dtype {fields['dtype']!r}")
    return fields


def load_sequence(path: str | os.PathLike) -> ImageSequence:
    """Load a sequence saved by save_sequence; path may omit the suffix."""
    base = _strip_suffix(os.fspath(path))
    fields = _parse_header(base + HEADER_SUFFIX)

    extents = {}
    for key in ("T", "D", "H", "W"):
        try:
            extents[key] = int(fields[key])
        except ValueError as exc:
            raise SequenceFormatError(f"{base}: extent {key}={fields[key]!r} is not an integer") from exc
        if extents[key] < 1:
            raise SequenceShapeError(f"{base}: extent {key}={extents[key]} must be positive")
    t, d, h, w = extents["T"], extents["D"], extents["H"], extents["W"]

    presence_tokens = fields["presence"].split(",")
    if len(presence_tokens) != t:
        raise SequenceShapeError(
            f"{base}: presence lists {len(presence_tokens)} slots, header says T={t}"
        )
    if any(token not in ("0", "1") for token in presence_tokens):
        raise SequenceFormatError(f"{base}: presence entries must be 0 or 1")
    presence = np.array([token == "1" for token in presence_tokens], dtype=bool)

    try:
        times = np.array([float(tok) for tok in fields["times"].split(",")], dtype=np.float64)
        target_time = float(fields["target_time"])
    except ValueError as exc:
        raise SequenceFormatError(f"{base}: malformed times field") from exc
    if times.shape != (t,):
        raise SequenceShapeError(f"{base}: times lists {times.shape[0]} slots, header says T={t}")

    payload_path = base + PAYLOAD_SUFFIX
    expected = (t + 1) * d * h * w * PAYLOAD_DTYPE.itemsize
    try:
        actual = os.path.getsize(payload_path)
    except OSError as exc:
        raise SequenceTruncatedError(f"{payload_path}: payload missing: {exc}") from exc
    if actual != expected:
        raise SequenceTruncatedError(
            f"{payload_path}: payload holds {actual} bytes, header implies {expected}"
        )
    with open(payload_path, "rb") as fh:
        flat = np.frombuffer(fh.read(), dtype=PAYLOAD_DTYPE)
    frames = flat[: t * d * h * w].reshape(t, d, h, w)
    target = flat[t * d * h * w :].reshape(d, h, w)
    return ImageSequence(frames, presence, times, target, target_time)
