import os

import pytest
import torch

torch.set_num_threads(max(1, os.cpu_count() or 1))

from advsig.config import DatasetSpec
from advsig.data import ingest_dataset, toy_images


@pytest.fixture(scope="session")
def toy_batch():
    images, labels = toy_images(32, 32, seed=11)
    return images, labels


@pytest.fixture(scope="session")
def tiny_dataset():
    # 240 train / 60 test; enough for smoke-training tests
    return ingest_dataset(DatasetSpec(source="toy", count=300, test_size=60, split_seed=5))
