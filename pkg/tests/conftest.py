"""Shared fixtures: small seeded datasets, a width-8 16x16 model config and random pair samples."""

import os

import numpy as np
import pytest

from function.compute_data.dataset import generate_dataset
from function.compute_data.synthgen import PairSample
from function.compute_mask.masks import BinaryMask
from function.compute_model.model import ModelConfig


def pytest_collection_modifyitems(config, items):
    if os.getenv("XVIEW_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set XVIEW_RUN_SLOW=1 to run desk-scale acceptance runs")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(seed=7, n_train=24, n_val=8, direction="ego2exo")


@pytest.fixture(scope="session")
def joint_dataset():
    return generate_dataset(seed=11, n_train=12, n_val=8, direction="joint")


@pytest.fixture
def small_config():
    return ModelConfig(dim=8, image_size=16, patch_size=4)


def random_box_mask(rng, size, min_side=3, max_side=8):
    h = int(rng.integers(min_side, max_side + 1))
    w = int(rng.integers(min_side, max_side + 1))
    y = int(rng.integers(0, size - h + 1))
    x = int(rng.integers(0, size - w + 1))
    bits = np.zeros((size, size), dtype=bool)
    bits[y:y + h, x:x + w] = True
    return BinaryMask.from_array(bits)


@pytest.fixture
def pair_factory(rng):
    """Random query/target pairs with rectangular masks, sized for ``small_config``."""

    def make(size=16, num_categories=5, target_empty=False):
        target = BinaryMask.empty(size, size) if target_empty else random_box_mask(rng, size)
        query = random_box_mask(rng, size)
        category = int(rng.integers(num_categories))
        return PairSample(
            query_image=rng.uniform(0.0, 1.0, size=(size, size, 3)),
            query_mask=query,
            target_image=rng.uniform(0.0, 1.0, size=(size, size, 3)),
            target_mask=target,
            category=category,
            text_category=category,
            visible_query=True,
            visible_target=not target.is_empty(),
        )

    return make
