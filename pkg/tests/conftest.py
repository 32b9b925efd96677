import numpy as np
import pytest

from panfusion.datasim import SynthConfig, synth_dataset
from panfusion.tensorio import load_manifest
from panfusion.trainer import TrainConfig, train


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small synthetic dataset shared across trainer and CLI tests."""
    root = tmp_path_factory.mktemp("tiny_data")
    cfg = SynthConfig(out_root=root, bands=3, patch_size=16,
                      train_count=6, val_count=1, test_count=2, seed=5)
    manifests = synth_dataset(cfg)
    return {"cfg": cfg, "manifests": manifests, "root": root}


@pytest.fixture(scope="session")
def tiny_train_config():
    return TrainConfig(iterations=100, batch_size=2, base_channels=8,
                       channel_multipliers=(1, 2), seed=3, lr=1e-3)


@pytest.fixture(scope="session")
def tiny_run(tiny_dataset, tiny_train_config, tmp_path_factory):
    """One short training run reused by sampling and evaluation tests."""
    out = tmp_path_factory.mktemp("tiny_run")
    result = train(tiny_dataset["manifests"]["train"], tiny_train_config, out)
    return {"result": result, "cfg": tiny_train_config, "out": out}


@pytest.fixture()
def test_manifest(tiny_dataset):
    return load_manifest(tiny_dataset["manifests"]["test"])
