"""Shared builders for protocol-level tests: tiny streams, short schedules."""

import pytest

from protodrift.data import SyntheticSpec, make_synthetic, split_tasks
from protodrift.protocol import ModelConfig, StrategyConfig, TrainConfig


def make_stream(n_classes=4, seed=0, n_per_class=16, channels=3, length=64,
                drift_profile=0.0, noise_sigma=0.1):
    spec = SyntheticSpec(n_classes=n_classes, channels=channels, length=length,
                         n_per_class=n_per_class, drift_profile=drift_profile,
                         noise_sigma=noise_sigma)
    return split_tasks(make_synthetic(spec, seed), n_classes, seed)


def make_cfg(method="FULL", epochs=(4, 4, 4), samples_per_class=32, **train_overrides):
    train = TrainConfig(epochs_s1=epochs[0], epochs_s2=epochs[1], epochs_s3=epochs[2],
                        samples_per_class=samples_per_class, **train_overrides)
    return StrategyConfig(method=method, model=ModelConfig(), train=train)


@pytest.fixture
def tiny_stream():
    return make_stream()


@pytest.fixture
def tiny_cfg():
    return make_cfg()
