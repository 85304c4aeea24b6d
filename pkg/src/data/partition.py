"""
Pathological non-IID partitioning: cut every class into single-class shards,
N*C in total, and deal C shards to every client, so each client sees at most
C classes.
"""
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from src.model import Batch
from src.utils import ConfigError, rng_stream


logger = logging.getLogger(__name__)

# every TEST_PERIOD-th sample of a client goes to its test split (6:1)
TEST_PERIOD = 7


@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    classes_per_client: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError(f"partition.num_clients: must be positive, got {self.num_clients}")
        if self.classes_per_client < 1:
            raise ConfigError(f"partition.classes_per_client: must be positive, got {self.classes_per_client}")


@dataclass
class ClientDataset:
    client_id: int
    train: Batch
    test: Batch
    train_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        if self.train.n < 1:
            raise ConfigError(f"client {self.client_id}: empty training split")

    @property
    def classes(self):
        return set(np.unique(np.concatenate([self.train.labels, self.test.labels])).tolist())

    @property
    def num_samples(self):
        return self.train.n + self.test.n


def split_train_test(indices):
    """Round-robin 6:1 split of an ordered index list."""
    indices = np.asarray(indices, dtype=np.int64)
    is_test = (np.arange(indices.size) % TEST_PERIOD) == TEST_PERIOD - 1
    return indices[~is_test], indices[is_test]


def _allocate_shards(counts, n_shards):
    """Shards per class: one each, then greedily to the class with the most samples per shard."""
    alloc = np.ones(counts.size, dtype=np.int64)
    for _ in range(n_shards - counts.size):
        load = np.where(alloc < counts, counts / alloc, -np.inf)
        alloc[int(np.argmax(load))] += 1
    return alloc


def pathological_partition(full, spec):
    """
    Deal single-class shards to clients.

    The N*C shards are spread over the classes in proportion to their sizes and
    every class is cut into its shards in label-sorted order, so no shard spans
    two classes and a client never sees more than C of them.

    Args:
        full:       Batch with the whole dataset
        spec:       PartitionSpec (N clients, C shards per client, seed)

    Returns:
        clients:    List of N ClientDataset, client i holding C shards
    """
    n_shards = spec.num_clients * spec.classes_per_client
    labels, counts = np.unique(full.labels, return_counts=True)
    num_classes = labels.size
    if spec.classes_per_client > num_classes:
        raise ConfigError(f"partition.classes_per_client: {spec.classes_per_client} exceeds the {num_classes} classes present")
    if n_shards < num_classes:
        raise ConfigError(f"partition.num_clients: {n_shards} shards cannot cover {num_classes} classes "
                          f"without mixing them")
    if full.n < n_shards:
        raise ConfigError(f"partition.num_clients: {full.n} samples cannot fill {n_shards} shards")
    order = np.argsort(full.labels, kind='stable')
    bounds = np.concatenate([[0], np.cumsum(counts)])
    alloc = _allocate_shards(counts, n_shards)
    shards = []
    for ldx in range(num_classes):
        shards.extend(np.array_split(order[bounds[ldx]:bounds[ldx + 1]], alloc[ldx]))
    logger.debug("shards per class: %s", dict(zip(labels.tolist(), alloc.tolist())))
    deal = rng_stream(spec.seed, 'partition').permutation(n_shards)
    clients = []
    for cdx in range(spec.num_clients):
        owned = deal[cdx * spec.classes_per_client:(cdx + 1) * spec.classes_per_client]
        indices = np.concatenate([shards[sdx] for sdx in owned])
        train_idx, test_idx = split_train_test(indices)
        clients.append(ClientDataset(cdx, full.subset(train_idx), full.subset(test_idx),
                                     train_idx, test_idx))
    return clients


def class_overlap(clients):
    """Mean number of shared classes over all client pairs."""
    if len(clients) < 2:
        return 0.
    class_sets = [client.classes for client in clients]
    overlaps = [len(a & b) for a, b in itertools.combinations(class_sets, 2)]
    return float(np.mean(overlaps))
