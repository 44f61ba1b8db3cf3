"""Shared fixtures: a tiny run configuration and a small split corpus that trains in seconds."""

import pytest

from affordancelib import data
from affordancelib.config import RunConfig
from affordancelib.data import DatasetManifest, SyntheticTaskSpec, TaskKind
from affordancelib.diffusion import SamplerConfig, ScheduleConfig
from affordancelib.model import tiny_config
from affordancelib.training import TrainConfig

TINY_CANVAS = (16, 16)


def tiny_spec(task: TaskKind = TaskKind.PUSH_LINE, seed: int = 0) -> SyntheticTaskSpec:
    return SyntheticTaskSpec(
        task=task,
        canvas=TINY_CANVAS,
        seed=seed,
        displacement=0.25,
        arc_radius=0.15,
        min_size=2,
        max_size=3,
        max_shapes=2,
    )


@pytest.fixture
def tiny_run() -> RunConfig:
    return RunConfig(
        model=tiny_config(image_size=TINY_CANVAS),
        schedule=ScheduleConfig(steps=100),
        sampler=SamplerConfig(steps=2),
        train=TrainConfig(
            steps=4,
            batch_size=4,
            learning_rate=1e-3,
            eval_interval=2,
            log_interval=1,
        ),
    )


@pytest.fixture(scope="session")
def tiny_corpus() -> DatasetManifest:
    return data.split(data.generate_synthetic(tiny_spec(), 8), 0.75, seed=0)
