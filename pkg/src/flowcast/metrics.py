"""Image-quality metrics and report serialization.

All metrics assume intensities on a known scale (default peak 1.0). SSIM
follows the classic windowed formulation: Gaussian window of 11 taps with
sigma 1.5, stabilizers C1 = (0.01 L)^2 and C2 = (0.03 L)^2. Volumes are
scored slice-wise along the depth axis by default; a volumetric 3D window
is available behind a flag.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

METRICS_SCHEMA = "flowcast.metrics.v1"

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _as_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("images must be non-empty")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("images contain non-finite values")
    return a, b


def mse(a, b) -> float:
    a, b = _as_pair(a, b)
    diff = a - b
    return float((diff * diff).mean())


def nrmse(a, b) -> float:
    """Root mean squared error normalized by the intensity range of b."""
    a, b = _as_pair(a, b)
    span = float(b.max() - b.min())
    if span <= 0.0:
        raise ValueError("reference image has zero intensity range")
    return math.sqrt(mse(a, b)) / span


def psnr(a, b, *, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give +infinity."""
    if peak <= 0.0:
        raise ValueError(f"peak must be positive, got {peak}")
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def _ssim_map(a: np.ndarray, b: np.ndarray, data_range: float) -> np.ndarray:
    # truncate chosen so the Gaussian kernel spans exactly SSIM_WINDOW taps
    truncate = ((SSIM_WINDOW - 1) / 2) / SSIM_SIGMA

    def smooth(x):
        return gaussian_filter(x, SSIM_SIGMA, truncate=truncate, mode="reflect")

    mu_a = smooth(a)
    mu_b = smooth(b)
    var_a = smooth(a * a) - mu_a * mu_a
    var_b = smooth(b * b) - mu_b * mu_b
    cov = smooth(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, *, data_range: float = 1.0, volumetric: bool = False) -> float:
    """Mean structural similarity between two volumes or 2D images.

    [D, H, W] inputs are scored per depth slice and averaged; volumetric=True
    uses a 3D window instead and requires every extent >= the window size.
    """
    a, b = _as_pair(a, b)
    if data_range <= 0.0:
        raise ValueError(f"data_range must be positive, got {data_range}")
    if a.ndim == 2:
        planes = [(a, b)]
        volumetric = False
    elif a.ndim == 3:
        planes = [(a[i], b[i]) for i in range(a.shape[0])]
    else:
        raise ValueError(f"ssim expects 2D or 3D images, got shape {a.shape}")

    if volumetric:
        if min(a.shape) < SSIM_WINDOW:
            raise ValueError(
                f"volumetric ssim needs every extent >= {SSIM_WINDOW}, got {a.shape}"
            )
        return float(_ssim_map(a, b, data_range).mean())

    if min(planes[0][0].shape) < SSIM_WINDOW:
        raise ValueError(
            f"in-plane extents must be >= {SSIM_WINDOW}, got {planes[0][0].shape}"
        )
    return float(np.mean([_ssim_map(pa, pb, data_range).mean() for pa, pb in planes]))


METRIC_FUNCTIONS = {
    "mse": mse,
    "nrmse": nrmse,
    "psnr": psnr,
    "ssim": ssim,
}


@dataclass(frozen=True)
class SampleMetrics:
    """Scores for one prediction, tagged with the method that produced it."""

    label: str
    index: int
    mse: float
    nrmse: float
    psnr_db: float
    ssim: float


@dataclass(frozen=True)
class MetricsReport:
    """Per-sample metric records plus provenance; aggregates are recomputed on demand."""

    samples: tuple[SampleMetrics, ...]
    provenance: dict[str, Any] = field(default_factory=dict)
    schema: str = METRICS_SCHEMA

    def labels(self) -> tuple[str, ...]:
        seen: list[str] = []
        for sample in self.samples:
            if sample.label not in seen:
                seen.append(sample.label)
        return tuple(seen)

    def aggregate(self, label: str | None = None) -> dict[str, float]:
        """Mean and population std of every metric over samples with the label."""
        rows = [s for s in self.samples if label is None or s.label == label]
        if not rows:
            raise ValueError(f"no samples with label {label!r}")
        out: dict[str, float] = {"count": float(len(rows))}
        for name in ("mse", "nrmse", "psnr_db", "ssim"):
            values = np.array([getattr(s, name) for s in rows], dtype=np.float64)
            out[f"{name}_mean"] = float(values.mean())
            out[f"{name}_std"] = float(values.std())
        return out


def score_prediction(label: str, index: int, prediction, reference) -> SampleMetrics:
    return SampleMetrics(
        label=label,
        index=index,
        mse=mse(prediction, reference),
        nrmse=nrmse(prediction, reference),
        psnr_db=psnr(prediction, reference),
        ssim=ssim(prediction, reference),
    )


def score_batch(label: str, predictions: Sequence, references: Sequence) -> list[SampleMetrics]:
    if len(predictions) != len(references):
        raise ValueError("predictions and references must pair up")
    return [
        score_prediction(label, i, p, r) for i, (p, r) in enumerate(zip(predictions, references))
    ]


def _fmt(value: float) -> str:
    # repr round-trips floats exactly, keeping re-runs byte-identical
    if value == math.inf:
        return "inf"
    if value == -math.inf:
        return "-inf"
    return repr(float(value))


def write_metrics_csv(report: MetricsReport, path: str) -> None:
    """Per-sample rows with provenance as leading comment lines."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# schema={report.schema}\n")
        for key in sorted(report.provenance):
            fh.write(f"# {key}={report.provenance[key]}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "index", "mse", "nrmse", "psnr_db", "ssim"])
        for s in report.samples:
            writer.writerow(
                [s.label, s.index, _fmt(s.mse), _fmt(s.nrmse), _fmt(s.psnr_db), _fmt(s.ssim)]
            )


def write_metrics_json(report: MetricsReport, path: str) -> None:
    """Samples, aggregates per label, and provenance in one document."""
    payload = {
        "schema": report.schema,
        "provenance": {k: report.provenance[k] for k in sorted(report.provenance)},
        "samples": [asdict(s) for s in report.samples],
        "aggregates": {label: report.aggregate(label) for label in report.labels()},
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=False)
        fh.write("\n")


def read_metrics_csv(path: str) -> tuple[list[SampleMetrics], dict[str, str]]:
    """Inverse of write_metrics_csv, for report tooling and tests."""
    samples: list[SampleMetrics] = []
    provenance: dict[str, str] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        rows: Iterable[str] = fh.read().splitlines()
    body: list[str] = []
    for line in rows:
        if line.startswith("# "):
            key, _, value = line[2:].partition("=")
            provenance[key] = value
        elif line:
            body.append(line)
    reader = csv.DictReader(body)
    for row in reader:
        samples.append(
            SampleMetrics(
                label=row["label"],
                index=int(row["index"]),
                mse=float(row["mse"]),
                nrmse=float(row["nrmse"]),
                psnr_db=float(row["psnr_db"]),
                ssim=float(row["ssim"]),
            )
        )
    return samples, provenance
