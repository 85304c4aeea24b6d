import numpy as np
import pytest

from src.data.generator import synth_dataset
from src.data.partition import PartitionSpec, pathological_partition
from src.model import Batch, MlpSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def blobs():
    return synth_dataset(num_classes=4, samples_per_class=21, dim=5, separation=3., seed=0)


@pytest.fixture
def small_clients(blobs):
    return pathological_partition(blobs, PartitionSpec(num_clients=4, classes_per_client=2, seed=0))


@pytest.fixture
def tiny_spec():
    return MlpSpec(input_dim=5, hidden_dims=(6,), num_classes=4, activation='tanh')


@pytest.fixture
def random_batch(rng):
    return Batch(rng.standard_normal((12, 5)), rng.integers(0, 4, size=12))
