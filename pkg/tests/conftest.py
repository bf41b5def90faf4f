"""
Shared fixtures for the FedHAR test suite
"""
import sys
import os

# Add the project directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
import pytest

from config import FedConfig, FineTuneConfig, SynthConfig, SyntheticDatasetSpec
from data_loader import WindowSet, build_federation_layout
from synthetic import generate_synthetic_clients


def tiny_synth_config(n_clients=2, classes=("W", "ST", "L"), min_windows=20, max_windows=30, tags=("a",)):
    return SynthConfig(datasets=[
        SyntheticDatasetSpec(tag=tag, n_clients=n_clients, classes=list(classes),
                             min_windows=min_windows, max_windows=max_windows)
        for tag in tags
    ])


def random_window_set(n, seed=0, labels=True, client_id="c000", source="a", n_classes=3):
    rng = np.random.default_rng(seed)
    return WindowSet(
        windows=rng.standard_normal((n, 6, 128)).astype(np.float32),
        labels=rng.integers(0, n_classes, size=n) if labels else None,
        source_dataset=source,
        client_id=client_id,
    )


@pytest.fixture
def tiny_synth():
    return tiny_synth_config()


@pytest.fixture
def tiny_layout():
    """Two tags, two clients each, 20-30 windows per client"""
    cfg = tiny_synth_config(tags=("a", "b"))
    return build_federation_layout(generate_synthetic_clients(cfg, seed=7), seed=7)


@pytest.fixture
def quick_fed():
    return FedConfig(rounds=2, local_epochs=1, client_lr=0.01, client_batch=16, seed=3)


@pytest.fixture
def quick_finetune():
    return FineTuneConfig(epochs=2, lr=1e-3, batch=16, seed=3)
