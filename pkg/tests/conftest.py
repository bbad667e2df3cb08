"""Shared fixtures: tiny desk-scale data and models kept cheap on one CPU core."""

import numpy as np
import pytest
import torch

from flowcast import (
    DynamicsSpec,
    ImageSequence,
    ModelConfig,
    SequenceShape,
    VelocityUNet,
    generate_cohort,
)

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_shape() -> SequenceShape:
    return SequenceShape(3, 4, 16, 16)


@pytest.fixture(scope="session")
def tiny_spec(tiny_shape) -> DynamicsSpec:
    return DynamicsSpec(kind="growing_disk", shape=tiny_shape, growth_rate=1.5, seed=5)


@pytest.fixture(scope="session")
def tiny_cohort(tiny_spec) -> list[ImageSequence]:
    return generate_cohort(tiny_spec, 12)


@pytest.fixture(scope="session")
def tiny_model_cfg() -> ModelConfig:
    return ModelConfig(
        in_frames=3, base_features=8, channel_mults=(1, 2), attention_resolution=8
    )


@pytest.fixture()
def tiny_model(tiny_model_cfg, tiny_shape) -> VelocityUNet:
    return VelocityUNet(tiny_model_cfg, tiny_shape.volume, seed=3)


def random_sequence(
    rng: np.random.Generator,
    shape: SequenceShape,
    presence=None,
) -> ImageSequence:
    """A valid random sequence; absent slots zeroed, intensities in [0, 1]."""
    t = shape.n_frames
    if presence is None:
        presence = rng.random(t) < 0.7
        if not presence.any():
            presence[t - 1] = True
    presence = np.asarray(presence, dtype=bool)
    frames = rng.random((t, *shape.volume)).astype(np.float32)
    frames[~presence] = 0.0
    times = np.sort(rng.random(t)).astype(np.float64)
    while len(np.unique(times)) != t:
        times = np.sort(rng.random(t)).astype(np.float64)
    target = rng.random(shape.volume).astype(np.float32)
    return ImageSequence(frames, presence, times, target, 1.5)
