import os

import numpy as np
import pytest

from pipeline.config import ModelConfig
from pipeline.features import FeatureMatrix


def pytest_collection_modifyitems(config, items):
    if os.environ.get("CSED_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set CSED_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_model_cfg():
    """D=8 input, one conv layer of 2 channels, 4 GRU units, 3 events."""
    return ModelConfig(conv_layers=1, conv_channels=(2,), gru_units=4, n_events=3)


@pytest.fixture
def tiny_features():
    rng = np.random.default_rng(3)
    return FeatureMatrix(values=rng.standard_normal((8, 12)), hop_ms=20.0)
