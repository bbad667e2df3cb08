"""Declarative experiment configuration.

One INI file with sections mirroring the config dataclasses (dataset,
model, train, solver, masks, output). Unknown sections or keys are errors,
so typos fail loudly instead of silently falling back to defaults. The
config hash covers everything that affects results (not the output
directory) and is embedded in checkpoints so evaluation can refuse a
checkpoint whose data, masks, or model settings drifted from the config
it is being evaluated with.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, replace
from typing import Any, Callable

from .integrate import SolverConfig
from .model import ModelConfig
from .sequences import SequenceShape
from .synthetic import KINDS, DynamicsSpec
from .training import TrainConfig


class ConfigError(Exception):
    """Malformed or unknown configuration content; a usage error."""


@dataclass(frozen=True)
class SplitSizes:
    train: int = 64
    val: int = 16
    test: int = 16

    def __post_init__(self) -> None:
        if min(self.train, self.val, self.test) < 1:
            raise ValueError("every split must contain at least one patient")

    @property
    def total(self) -> int:
        return self.train + self.val + self.test


@dataclass(frozen=True)
class MaskSettings:
    """Rate shared by training-time masking and the frozen val/test MaskSets."""

    mask_rate: float = 0.5
    val_seed: int = 20
    test_seed: int = 30

    def __post_init__(self) -> None:
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError("mask_rate must lie in [0, 1]")
        if self.val_seed < 0 or self.test_seed < 0:
            raise ValueError("mask seeds must be non-negative")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DynamicsSpec
    splits: SplitSizes
    model: ModelConfig
    train: TrainConfig
    solver: SolverConfig
    masks: MaskSettings
    out_dir: str = "runs/experiment"

    def to_dict(self) -> dict[str, Any]:
        out = {
            "dataset": asdict(self.dataset),
            "splits": asdict(self.splits),
            "model": asdict(self.model),
            "train": asdict(self.train),
            "solver": asdict(self.solver),
            "masks": asdict(self.masks),
        }
        out["dataset"]["shape"] = asdict(self.dataset.shape)
        return out

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok.strip()) for tok in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _parse_float_pair(text: str) -> tuple[float, float]:
    toks = [tok.strip() for tok in text.split(",")]
    if len(toks) != 2:
        raise ConfigError(f"expected two comma-separated floats, got {text!r}")
    try:
        return float(toks[0]), float(toks[1])
    except ValueError as exc:
        raise ConfigError(f"expected floats, got {text!r}") from exc


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


_CONVERTERS: dict[str, dict[str, Callable[[str], Any]]] = {
    "dataset": {
        "kind": str,
        "n_frames": int,
        "depth": int,
        "height": int,
        "width": int,
        "n_train": int,
        "n_val": int,
        "n_test": int,
        "amplitude": float,
        "growth_rate": float,
        "drift": _parse_float_pair,
        "noise_sigma": float,
        "seed": int,
    },
    "model": {
        "base_features": int,
        "channel_mults": _parse_int_tuple,
        "res_blocks_per_level": int,
        "attention_resolution": int,
        "conditioning": str,
        "num_heads": int,
    },
    "train": {
        "epochs": int,
        "batch_size": int,
        "learning_rate": float,
        "weight_decay": float,
        "warmup_fraction": float,
        "grad_clip": float,
        "seed": int,
        "method": str,
        "sparsity_filling": _parse_bool,
        "loss_norm": str,
    },
    "solver": {
        "method": str,
        "steps": int,
        "reduction": str,
    },
    "masks": {
        "mask_rate": float,
        "val_seed": int,
        "test_seed": int,
    },
    "output": {
        "directory": str,
    },
}


def _section_values(parser: configparser.ConfigParser, section: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    if not parser.has_section(section):
        return values
    converters = _CONVERTERS[section]
    for key, raw in parser.items(section):
        if key not in converters:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        try:
            values[key] = converters[key](raw)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from exc
    return values


def load_config(path: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc

    for section in parser.sections():
        if section not in _CONVERTERS:
            raise ConfigError(f"unknown section [{section}]")

    ds = _section_values(parser, "dataset")
    model_kv = _section_values(parser, "model")
    train_kv = _section_values(parser, "train")
    solver_kv = _section_values(parser, "solver")
    masks_kv = _section_values(parser, "masks")
    output_kv = _section_values(parser, "output")

    try:
        shape = SequenceShape(
            ds.pop("n_frames", 7), ds.pop("depth", 8), ds.pop("height", 32), ds.pop("width", 32)
        )
        splits = SplitSizes(
            ds.pop("n_train", 64), ds.pop("n_val", 16), ds.pop("n_test", 16)
        )
        kind = ds.pop("kind", "growing_disk")
        if kind not in KINDS:
            raise ConfigError(f"dataset.kind must be one of {KINDS}, got {kind!r}")
        dataset = DynamicsSpec(kind=kind, shape=shape, **ds)
        train = TrainConfig(**train_kv)
        in_frames = 1 if train.method == "lci_fm" else shape.n_frames
        model = ModelConfig(in_frames=in_frames, **model_kv)
        solver = SolverConfig(**solver_kv)
        masks = MaskSettings(**masks_kv)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc

    return ExperimentConfig(
        dataset=dataset,
        splits=splits,
        model=model,
        train=train,
        solver=solver,
        masks=masks,
        out_dir=output_kv.get("directory", "runs/experiment"),
    )


def override_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Replace the training seed (model init and optimization randomness)."""
    return replace(cfg, train=replace(cfg.train, seed=seed))


def save_config_echo(cfg: ExperimentConfig, path: str) -> None:
    payload = cfg.to_dict()
    payload["hash"] = cfg.hash()
    payload["out_dir"] = cfg.out_dir
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
