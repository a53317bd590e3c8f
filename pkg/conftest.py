"""
Shared fixtures for the TopoTTA desk toolkit tests.
"""
import numpy as np
import pytest

from topotta.config import AdaptConfig, HgConfig
from topotta.model.checkpoint import Checkpoint
from topotta.model.segnet import ModelMeta, SegModel
from topotta.synth.generator import domain_preset, generate

collect_ignore = ["examples"]

SMALL_META = ModelMeta(levels=2, base_channels=4)
SMALL_SIZE = 32


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run default-scale end-to-end tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long end-to-end runs")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_pairs():
    """Four source-domain (image, label) pairs of side 32."""
    return list(generate(domain_preset("source", SMALL_SIZE), 4, seed=3, levels=SMALL_META.levels))


@pytest.fixture
def small_model(small_pairs):
    model = SegModel.create(SMALL_META, seed=0)
    model.calibrate_bn(np.stack([image for image, _ in small_pairs])[:, None])
    return model


@pytest.fixture
def small_checkpoint(small_model):
    return Checkpoint.from_model(small_model, seed=0)


@pytest.fixture
def small_adapt_cfg():
    return AdaptConfig(grid_n=2, scales=(0.5, 1.0, 1.25), teacher_rounds=2)


@pytest.fixture
def small_hg_cfg():
    return HgConfig(window=8, k=0.05, tau=0.5, tau_bg=0.2)
