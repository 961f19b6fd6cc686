"""
Pytest configuration and fixtures for protomargin tests.

This file contains shared fixtures used across all test modules.
"""

from pathlib import Path

import numpy as np
import pytest

from protomargin.dataset import write_dataset
from protomargin.protonet import ProtoNet, ProtoNetConfig, init_params
from protomargin.synthgen import SynthConfig, SynthSample, generate_corpus
from protomargin.trainer import TrainConfig


# Smallest image side for which every class's lesion fits with its border.
TOY_IMAGE_SIZE = 48


# ============================================================================
# Random Fixtures
# ============================================================================


@pytest.fixture
def rng() -> np.random.Generator:
    """Create a seeded generator for test data."""
    return np.random.default_rng(12345)


# ============================================================================
# Model Fixtures
# ============================================================================


@pytest.fixture
def toy_model_config() -> ProtoNetConfig:
    """Create a small two-block architecture on 48 px images (12x12 grid)."""
    return ProtoNetConfig(
        channels=(3, 4),
        prototype_dim=4,
        prototypes_per_class=2,
        k=2,
        image_size=TOY_IMAGE_SIZE,
    )


@pytest.fixture
def toy_net(toy_model_config: ProtoNetConfig) -> ProtoNet:
    """Create a freshly initialized toy network."""
    return ProtoNet(init_params(toy_model_config, seed=0))


@pytest.fixture
def toy_train_config() -> TrainConfig:
    """Create a fast training configuration matching the toy architecture."""
    return TrainConfig(
        channels=(3, 4),
        prototype_dim=4,
        prototypes_per_class=2,
        k=2,
        image_size=TOY_IMAGE_SIZE,
        a1_epochs=1,
        max_cycles=1,
        coarse_per_batch=6,
        fine_per_batch=2,
        a3_epochs=2,
        a3_batch_size=6,
        b_steps=30,
        augment=False,
        seed=0,
    )


# ============================================================================
# Data Fixtures
# ============================================================================


@pytest.fixture(scope="session")
def toy_corpus() -> list[SynthSample]:
    """Generate four samples per class at toy resolution."""
    return generate_corpus(SynthConfig(class_counts=(4, 4, 4), image_size=TOY_IMAGE_SIZE), 0)


@pytest.fixture
def toy_samples(toy_corpus: list[SynthSample]) -> list[SynthSample]:
    """Return a fresh list over the toy corpus."""
    return list(toy_corpus)


@pytest.fixture
def toy_dataset(tmp_path: Path, toy_corpus: list[SynthSample]) -> Path:
    """Write the toy corpus to disk and return its manifest path."""
    manifest = write_dataset(toy_corpus, tmp_path / "data", counts=(6, 3, 3), fine_annotated=2)
    return manifest.path
