import numpy as np
from sklearn.datasets import make_blobs

from src.model import Batch
from src.utils import ConfigError, rng_stream



def class_means(num_classes, dim, separation, seed=0):
    """
    Class centroids of norm `separation`.

    Args:
        num_classes:        Number of classes
        dim:                Feature dimensionality
        separation:         Distance of every centroid from the origin
        seed:               Seed for the directions when num_classes > dim

    Returns:
        means:              num_classes x dim array; scaled basis vectors when
                            num_classes <= dim, random unit directions otherwise
    """
    if num_classes <= dim:
        return separation * np.eye(num_classes, dim)
    directions = rng_stream(seed, 'data').standard_normal((num_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return separation * directions


def synth_dataset(num_classes=10, samples_per_class=100, dim=10, separation=3., seed=0):
    """
    Gaussian blobs with unit covariance, exactly `samples_per_class` per class.

    Args:
        num_classes:        Number of classes (>= 2)
        samples_per_class:  Samples drawn for each class
        dim:                Feature dimensionality (>= 2)
        separation:         Norm of each class mean (> 0)
        seed:               Random seed

    Returns:
        batch:              Batch sorted by class
    """
    if num_classes < 2:
        raise ConfigError(f"dataset.num_classes: must be at least 2, got {num_classes}")
    if dim < 2:
        raise ConfigError(f"dataset.dim: must be at least 2, got {dim}")
    if samples_per_class < 1:
        raise ConfigError(f"dataset.samples_per_class: must be positive, got {samples_per_class}")
    if not separation > 0:
        raise ConfigError(f"dataset.separation: must be positive, got {separation}")
    means = class_means(num_classes, dim, separation, seed)
    X, y = make_blobs(n_samples=[samples_per_class] * num_classes, n_features=dim,
                      centers=means, cluster_std=1., shuffle=False, random_state=seed)
    return Batch(X, y)
