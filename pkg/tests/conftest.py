"""
Pytest configuration and fixtures for testing.
Uses small generated datasets and tiny networks so every test runs in-process
within seconds.
"""

from pathlib import Path
from typing import Callable

import numpy as np
import pytest

from cmkd import instrumentation
from cmkd.data import PairedDataset, generate, save_dataset
from cmkd.schemas import (
    ExperimentConfig,
    ExtractorConfig,
    GeneratorSpec,
    ModelSection,
    Task,
    TrainConfig,
)


@pytest.fixture(autouse=True)
def reset_counters():
    """Start every test with zeroed operation counters."""
    instrumentation.reset()
    yield
    instrumentation.reset()


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator for random instances."""
    return np.random.default_rng(1234)


@pytest.fixture
def dec_spec() -> GeneratorSpec:
    """Six trials of a 3-class problem with small input widths."""
    return GeneratorSpec(
        task=Task.DEC,
        n_trials=6,
        samples_per_trial=20,
        latent_dim=3,
        student_dim=5,
        teacher_dim=7,
        num_classes=3,
        seed=1,
    )


@pytest.fixture
def cer_spec(dec_spec: GeneratorSpec) -> GeneratorSpec:
    """Continuous-label counterpart of dec_spec."""
    return dec_spec.model_copy(update={"task": Task.CER, "label_noise": 0.1})


@pytest.fixture
def dec_dataset(dec_spec: GeneratorSpec) -> PairedDataset:
    return generate(dec_spec)


@pytest.fixture
def cer_dataset(cer_spec: GeneratorSpec) -> PairedDataset:
    return generate(cer_spec)


@pytest.fixture
def dec_file(tmp_path: Path, dec_dataset: PairedDataset) -> Path:
    """dec_dataset written to disk."""
    path = tmp_path / "dec.csv"
    save_dataset(dec_dataset, path)
    return path


def tiny_config(
    task: Task = Task.DEC, epochs: int = 3, folds: int = 3, **train: object
) -> ExperimentConfig:
    """Smoke-sized experiment whose widths satisfy the injection contract."""
    student = ExtractorConfig(hidden_dims=[8], feature_dim=6, embed_dim=4)
    teacher = ExtractorConfig(hidden_dims=[8], feature_dim=8, embed_dim=4)
    return ExperimentConfig(
        data=GeneratorSpec(
            task=task,
            n_trials=6,
            samples_per_trial=20,
            latent_dim=3,
            student_dim=5,
            teacher_dim=7,
            seed=1,
        ),
        model=ModelSection(
            student=student,
            teacher=teacher,
            student_head_hidden=[6],
            teacher_head_hidden=[6],
        ),
        train=TrainConfig(
            **{
                "epochs": epochs,
                "teacher_epochs": epochs,
                "batch_size": 16,
                "lr_start": 1e-2,
                "lr_end": 1e-4,
                "patience": min(3, epochs),
                "folds": folds,
                **train,
            }
        ),
    )


@pytest.fixture
def smoke_config() -> ExperimentConfig:
    """Three epochs, three folds."""
    return tiny_config()


@pytest.fixture
def make_config() -> Callable[..., ExperimentConfig]:
    """Factory for smoke configs with other tasks, epochs or train fields."""
    return tiny_config
