import os

import numpy as np
import pytest

from network import ModelSpec
from phantom import PhantomConfig, generate_case
from volume_io import Mask3, Volume3


def pytest_collection_modifyitems(config, items):
    if os.getenv("C2W_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="end-to-end experiment; set C2W_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_spec():
    """Two stages on 8^3 inputs: widths 8 and 16, one stride-2 level."""
    return ModelSpec.desk((8, 8, 8), n_stages=2, scale=0.25, cardinality=2)


@pytest.fixture
def small_phantom_cfg():
    return PhantomConfig(dims=(16, 16, 16), radius_range=(0.18, 0.25), jitter=0.03, thickness=(1, 1),
                         counts=(4, 2, 2), seed=3)


@pytest.fixture
def phantom_case(small_phantom_cfg):
    return generate_case(small_phantom_cfg, np.random.default_rng(11))


def random_mask(rng, dims, p=0.3, spacing=(1.0, 1.0, 1.0)) -> Mask3:
    return Mask3((rng.random(dims) < p).astype(np.uint8), spacing)


def box_mask(dims, lo, hi, spacing=(1.0, 1.0, 1.0)) -> Mask3:
    data = np.zeros(dims, dtype=np.uint8)
    data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1
    return Mask3(data, spacing)


def random_volume(rng, dims, spacing=(1.0, 1.0, 1.0)) -> Volume3:
    return Volume3(rng.standard_normal(dims).astype(np.float32), spacing)
