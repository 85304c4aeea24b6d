import numpy as np
from dataclasses import dataclass, field
from scipy.special import log_softmax, softmax

from src.numerics import as_matrix, as_vector, check_finite
from src.utils import ConfigError, DimensionError, rng_stream



ACTIVATIONS = ('relu', 'tanh')


@dataclass(frozen=True)
class MlpSpec:
    """
    Fully connected classifier layout.

    Parameters are flattened layer by layer, each layer as its weight matrix
    (fan_in x fan_out, row-major) followed by its bias vector. Everything
    outside this module treats the flat vector as opaque.
    """
    input_dim: int
    hidden_dims: tuple = (64,)
    num_classes: int = 10
    activation: str = 'relu'

    def __post_init__(self):
        object.__setattr__(self, 'hidden_dims', tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1:
            raise ConfigError(f"model.input_dim: must be positive, got {self.input_dim}")
        if any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"model.hidden_dims: all widths must be positive, got {list(self.hidden_dims)}")
        if self.num_classes < 2:
            raise ConfigError(f"model.num_classes: must be at least 2, got {self.num_classes}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"model.activation: expected one of {ACTIVATIONS}, got '{self.activation}'")

    @property
    def layer_dims(self):
        return [self.input_dim, *self.hidden_dims, self.num_classes]

    @property
    def layer_shapes(self):
        dims = self.layer_dims
        return [(fan_in, fan_out) for fan_in, fan_out in zip(dims[:-1], dims[1:])]

    @property
    def num_params(self):
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_shapes)


@dataclass
class Batch:
    """Features (n x input_dim) with integer labels; n may be 0 only for test splits."""
    features: np.ndarray
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DimensionError(f"batch.features: expected 2-d array, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DimensionError(f"batch.labels: expected {self.features.shape[0]} labels, got shape {self.labels.shape}")
        check_finite(self.features, 'batch.features')
        if self.labels.size and self.labels.min() < 0:
            raise DimensionError("batch.labels: negative label")

    @property
    def n(self):
        return self.features.shape[0]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Batch(self.features[indices], self.labels[indices])


class MlpClassifier():
    """Softmax cross-entropy MLP with hand-written backpropagation."""

    def __init__(self, spec) -> None:
        """
        Args:
            spec:       MlpSpec with layer sizes and activation
        """
        self.spec = spec
        self.num_params = spec.num_params

    def init_params(self, seed):
        """Glorot-uniform weights, zero biases; deterministic in `seed`."""
        rng = rng_stream(seed, 'init')
        chunks = []
        for fan_in, fan_out in self.spec.layer_shapes:
            bound = np.sqrt(6. / (fan_in + fan_out))
            chunks.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
            chunks.append(np.zeros(fan_out))
        return np.concatenate(chunks)

    def unpack(self, theta):
        """Split the flat vector into [(W, b), ...] views."""
        theta = as_vector(theta, 'theta')
        if theta.size != self.num_params:
            raise DimensionError(f"theta: expected {self.num_params} parameters, got {theta.size}")
        layers = []
        offset = 0
        for fan_in, fan_out in self.spec.layer_shapes:
            W = theta[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = theta[offset:offset + fan_out]
            offset += fan_out
            layers.append((W, b))
        return layers

    def _check_batch(self, batch):
        if batch.n == 0:
            raise DimensionError("batch: no samples")
        if batch.features.shape[1] != self.spec.input_dim:
            raise DimensionError(f"batch.features: expected {self.spec.input_dim} columns, got {batch.features.shape[1]}")
        if batch.labels.max() >= self.spec.num_classes:
            raise DimensionError(f"batch.labels: label {batch.labels.max()} outside [0, {self.spec.num_classes})")

    def _activate(self, z):
        if self.spec.activation == 'relu':
            return np.maximum(z, 0.)
        return np.tanh(z)

    def _activation_grad(self, z, h):
        if self.spec.activation == 'relu':
            # subgradient 0 at the kink
            return (z > 0.).astype(np.float64)
        return 1. - h * h

    def _forward(self, layers, X):
        pre, post = [], [X]
        h = X
        for ldx, (W, b) in enumerate(layers):
            z = h @ W + b
            pre.append(z)
            if ldx < len(layers) - 1:
                h = self._activate(z)
                post.append(h)
        return pre, post

    def logits(self, theta, batch):
        self._check_batch(batch)
        pre, _ = self._forward(self.unpack(theta), batch.features)
        return pre[-1]

    def loss(self, theta, batch):
        """Mean cross-entropy over the batch."""
        logp = log_softmax(self.logits(theta, batch), axis=1)
        value = -np.mean(logp[np.arange(batch.n), batch.labels])
        return float(check_finite(value, 'loss'))

    def loss_and_grad(self, theta, batch):
        """
        Loss and its exact gradient in one forward/backward pass.

        Args:
            theta:      Flat parameter vector
            batch:      Batch of samples

        Returns:
            loss:       Mean cross-entropy
            grad:       Gradient w.r.t. theta, same flattening order
        """
        self._check_batch(batch)
        layers = self.unpack(theta)
        pre, post = self._forward(layers, batch.features)
        logits = pre[-1]
        n = batch.n
        rows = np.arange(n)
        value = -np.mean(log_softmax(logits, axis=1)[rows, batch.labels])
        dz = softmax(logits, axis=1)
        dz[rows, batch.labels] -= 1.
        dz /= n
        grads = [None] * len(layers)
        for ldx in range(len(layers) - 1, -1, -1):
            W, _ = layers[ldx]
            h_prev = post[ldx]
            grads[ldx] = ((h_prev.T @ dz).ravel(), dz.sum(axis=0))
            if ldx > 0:
                dh = dz @ W.T
                dz = dh * self._activation_grad(pre[ldx - 1], post[ldx])
        flat = np.concatenate([part for pair in grads for part in pair])
        return float(check_finite(value, 'loss')), check_finite(flat, 'grad')

    def grad(self, theta, batch):
        return self.loss_and_grad(theta, batch)[1]

    def predict(self, theta, batch):
        # argmax returns the first maximum, i.e. ties go to the lowest class
        return np.argmax(self.logits(theta, batch), axis=1)

    def accuracy(self, theta, batch):
        if batch.n == 0:
            return 0.
        return float(np.mean(self.predict(theta, batch) == batch.labels))


def init_params(spec, seed):
    return MlpClassifier(spec).init_params(seed)


def loss(spec, theta, batch):
    return MlpClassifier(spec).loss(theta, batch)


def grad(spec, theta, batch):
    return MlpClassifier(spec).grad(theta, batch)


def accuracy(spec, theta, batch):
    return MlpClassifier(spec).accuracy(theta, batch)
