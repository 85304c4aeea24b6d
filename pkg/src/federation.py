import logging
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np
from tqdm import tqdm

from src.consensus import GradientMatrix, aggregate, enforce_consensus, weighted_aggregate
from src.model import MlpClassifier, MlpSpec
from src.numerics import gram
from src.sampler import SamplerConfig, SimilarityTable, anneal_select, random_select, update_table
from src.utils import ConfigError, rng_stream


logger = logging.getLogger(__name__)

METHODS = ('fedcome', 'fedavg', 'fedsgd', 'fedcome_sgd')
CONSENSUS_METHODS = ('fedcome', 'fedcome_sgd')
SGD_METHODS = ('fedsgd', 'fedcome_sgd')
PARTICIPATION = ('full', 'partial')
SAMPLERS = ('anneal', 'random')


@dataclass(frozen=True)
class SamplerSettings:
    kind: str = 'anneal'
    mu: float = 0.7
    alpha: float = 0.5
    sa_iters: int = 600
    t0: float = 1.0
    temp_decay: float = 0.99
    # similarity.csv of an earlier run to start from instead of zeros
    table: str = None


@dataclass(frozen=True)
class ModelSettings:
    hidden_dims: tuple = (64,)
    activation: str = 'relu'


@dataclass(frozen=True)
class QpSettings:
    tol: float = 1e-8
    max_iter: int = 10000


_SECTIONS = {'sampler': SamplerSettings, 'model': ModelSettings, 'qp': QpSettings}


@dataclass(frozen=True)
class FederationConfig:
    """
    Federated training settings; defaults are lr 0.05 decayed by 0.998 per round,
    batch 50 and weight decay 1e-3.

    batch_size None means full batch. Under partial participation the subset
    size is num_selected, or participation_ratio * N rounded when it is unset.
    """
    method: str = 'fedcome'
    rounds: int = 100
    local_epochs: int = 1
    batch_size: int = 50
    eta: float = 0.05
    eta_g: float = 1.0
    lr_decay: float = 0.998
    weight_decay: float = 1e-3
    participation: str = 'full'
    num_selected: int = None
    participation_ratio: float = None
    seed: int = 0
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    model: ModelSettings = field(default_factory=ModelSettings)
    qp: QpSettings = field(default_factory=QpSettings)

    @classmethod
    def from_dict(cls, raw, prefix='federation'):
        """Build from a manifest section; unknown keys raise ConfigError."""
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{prefix}: expected a mapping, got {type(raw).__name__}")
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            if key not in known:
                raise ConfigError(f"{prefix}.{key}: unknown field")
            if key in _SECTIONS:
                section = _SECTIONS[key]
                if not isinstance(value, dict):
                    raise ConfigError(f"{prefix}.{key}: expected a mapping, got {type(value).__name__}")
                allowed = {f.name for f in fields(section)}
                for sub in value:
                    if sub not in allowed:
                        raise ConfigError(f"{prefix}.{key}.{sub}: unknown field")
                if key == 'model' and 'hidden_dims' in value:
                    value = value | {'hidden_dims': tuple(value['hidden_dims'])}
                value = section(**value)
            kwargs[key] = value
        return cls(**kwargs)

    def as_dict(self):
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in _SECTIONS:
                value = {sub.name: getattr(value, sub.name) for sub in fields(value)}
                if 'hidden_dims' in value:
                    value['hidden_dims'] = list(value['hidden_dims'])
            out[f.name] = value
        return out

    def with_overrides(self, **changes):
        return replace(self, **changes)

    @property
    def is_partial(self):
        return self.participation == 'partial'

    def subset_size(self, num_clients):
        if not self.is_partial:
            return num_clients
        if self.num_selected is not None:
            return int(self.num_selected)
        if self.participation_ratio is not None:
            return max(1, int(round(self.participation_ratio * num_clients)))
        raise ConfigError("federation.num_selected: required under partial participation "
                          "(or set federation.participation_ratio)")

    def sampler_config(self, num_clients):
        s = self.sampler
        return SamplerConfig(m=self.subset_size(num_clients), mu=s.mu, alpha=s.alpha, sa_iters=s.sa_iters,
                             t0=s.t0, temp_decay=s.temp_decay, seed=self.seed)

    def validate(self, num_clients=None):
        if self.method not in METHODS:
            raise ConfigError(f"federation.method: expected one of {METHODS}, got '{self.method}'")
        if self.rounds < 0:
            raise ConfigError(f"federation.rounds: must be nonnegative, got {self.rounds}")
        if self.local_epochs < 1:
            raise ConfigError(f"federation.local_epochs: must be at least 1, got {self.local_epochs}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"federation.batch_size: must be at least 1 or null (full batch), got {self.batch_size}")
        if not self.eta > 0:
            raise ConfigError(f"federation.eta: learning rate η must be positive, got {self.eta}")
        if not self.eta_g > 0:
            raise ConfigError(f"federation.eta_g: global learning rate η_g must be positive, got {self.eta_g}")
        if not 0. < self.lr_decay <= 1.:
            raise ConfigError(f"federation.lr_decay: must lie in (0, 1], got {self.lr_decay}")
        if self.weight_decay < 0:
            raise ConfigError(f"federation.weight_decay: must be nonnegative, got {self.weight_decay}")
        if self.participation not in PARTICIPATION:
            raise ConfigError(f"federation.participation: expected one of {PARTICIPATION}, got '{self.participation}'")
        if self.participation_ratio is not None and not 0. < self.participation_ratio <= 1.:
            raise ConfigError(f"federation.participation_ratio: must lie in (0, 1], got {self.participation_ratio}")
        if self.sampler.kind not in SAMPLERS:
            raise ConfigError(f"federation.sampler.kind: expected one of {SAMPLERS}, got '{self.sampler.kind}'")
        if self.sampler.table is not None and not isinstance(self.sampler.table, str):
            raise ConfigError(f"federation.sampler.table: expected a file path, got {self.sampler.table!r}")
        if not self.qp.tol > 0:
            raise ConfigError(f"federation.qp.tol: must be positive, got {self.qp.tol}")
        if self.qp.max_iter < 1:
            raise ConfigError(f"federation.qp.max_iter: must be at least 1, got {self.qp.max_iter}")
        s = self.sampler
        SamplerConfig(m=1, mu=s.mu, alpha=s.alpha, sa_iters=s.sa_iters, t0=s.t0, temp_decay=s.temp_decay).validate()
        if self.is_partial and num_clients is not None:
            self.sampler_config(num_clients).validate(num_clients)
        return self


@dataclass
class RoundRecord:
    round: int
    selected: tuple
    per_client_train_loss: np.ndarray
    per_client_test_acc: np.ndarray
    weighted_acc: float
    max_violation: float = 0.
    mean_drift: float = 0.
    qp_fallbacks: int = 0
    wall_time_ms: int = 0


@dataclass
class LocalResult:
    pseudo_grad: np.ndarray
    final_loss: float
    steps: int


def weighted_accuracy(accs, sizes):
    """Test-size weighted mean of client accuracies; clients without test samples carry no weight."""
    accs = np.asarray(accs, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    if accs.shape != sizes.shape:
        raise ConfigError(f"weighted_accuracy: {accs.size} accuracies but {sizes.size} sizes")
    if np.any(sizes < 0):
        raise ConfigError("weighted_accuracy: test sizes must be nonnegative")
    total = np.sum(sizes)
    if total <= 0:
        raise ConfigError("weighted_accuracy: no client has a test sample")
    return float(np.sum(sizes * accs) / total)


def global_loss(losses, sizes):
    """Sample-size weighted average of client losses, the federated objective."""
    sizes = np.asarray(sizes, dtype=np.float64)
    return float(np.sum(sizes * np.asarray(losses, dtype=np.float64)) / np.sum(sizes))


def local_train(model, theta, ds, epochs, batch_size, eta, weight_decay, seed, round_idx=0):
    """
    Minibatch SGD on one client.

    Args:
        model:          MlpClassifier
        theta:          Global parameters at the start of the round
        ds:             ClientDataset
        epochs:         Local epochs E
        batch_size:     Minibatch size B (None: full batch)
        eta:            Local learning rate
        weight_decay:   L2 coefficient added to the gradient
        seed:           Experiment seed; shuffles use the (local, round, client) stream
        round_idx:      Communication round

    Returns:
        result:         LocalResult with pseudo_grad = theta_start - theta_end
    """
    n = ds.train.n
    if n < 1:
        raise ConfigError(f"client {ds.client_id}: empty training split")
    if batch_size is not None and batch_size > n:
        logger.warning("client %d: batch size %d clamped to %d samples", ds.client_id, batch_size, n)
        batch_size = None
    theta_start = np.asarray(theta, dtype=np.float64)
    params = theta_start.copy()
    steps = 0
    if batch_size is None or batch_size == n:
        for _ in range(epochs):
            params -= eta * (model.grad(params, ds.train) + weight_decay * params)
            steps += 1
    else:
        rng = rng_stream(seed, 'local', round_idx, ds.client_id)
        for _ in range(epochs):
            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                batch = ds.train.subset(order[start:start + batch_size])
                params -= eta * (model.grad(params, batch) + weight_decay * params)
                steps += 1
    return LocalResult(theta_start - params, model.loss(params, ds.train), steps)


class FederatedSystem():
    """Server state of a simulated federation: global model, learning rate and similarity table."""

    def __init__(self, cfg, clients, spec=None) -> None:
        """
        Args:
            cfg:            FederationConfig
            clients:        List of ClientDataset, client_id equal to the list position
            spec:           MlpSpec; inferred from the data when None
        """
        if not clients:
            raise ConfigError("partition.num_clients: at least one client is required")
        self.cfg = cfg.validate(len(clients))
        self.clients = clients
        self.num_clients = len(clients)
        if spec is None:
            num_classes = max(2, 1 + max(int(c.train.labels.max()) for c in clients))
            spec = MlpSpec(input_dim=clients[0].train.features.shape[1],
                           hidden_dims=cfg.model.hidden_dims, num_classes=num_classes,
                           activation=cfg.model.activation)
        self.model = MlpClassifier(spec)
        self.theta = self.model.init_params(cfg.seed)
        self.eta = cfg.eta
        self.table = self._initial_table()
        self.test_sizes = np.array([c.test.n for c in clients], dtype=np.float64)
        if not self.test_sizes.any():
            raise ConfigError("partition: no client has a test sample, accuracy is undefined")
        self.train_sizes = np.array([c.train.n for c in clients], dtype=np.float64)
        self.subset_size = cfg.subset_size(self.num_clients)
        self.records = []
        self.initial_losses, self.initial_accs = self.evaluate()

    def _initial_table(self):
        path = self.cfg.sampler.table
        if path is None:
            return SimilarityTable.zeros(self.num_clients)
        table = SimilarityTable.from_csv(path)
        if table.N != self.num_clients:
            raise ConfigError(f"federation.sampler.table: {path} covers {table.N} clients, the federation has {self.num_clients}")
        logger.info("restored similarity table of %d clients from %s", table.N, path)
        return table

    def evaluate(self):
        """Train loss and test accuracy of every client under the current global model."""
        losses = np.array([self.model.loss(self.theta, c.train) for c in self.clients])
        accs = np.array([self.model.accuracy(self.theta, c.test) for c in self.clients])
        return losses, accs

    def global_loss(self, losses=None):
        if losses is None:
            losses = self.evaluate()[0]
        return global_loss(losses, self.train_sizes)

    def select(self, round_idx):
        if not self.cfg.is_partial or self.subset_size == self.num_clients:
            return tuple(range(self.num_clients))
        if self.cfg.sampler.kind == 'anneal':
            return anneal_select(self.table, self.cfg.sampler_config(self.num_clients), round_idx)
        return random_select(self.num_clients, self.subset_size, self.cfg.seed, round_idx)

    def _local_schedule(self):
        if self.cfg.method in SGD_METHODS:
            return 1, None
        return self.cfg.local_epochs, self.cfg.batch_size

    def _train_selected(self, selected, round_idx):
        epochs, batch_size = self._local_schedule()
        results = [local_train(self.model, self.theta, self.clients[cid], epochs, batch_size,
                               self.eta, self.cfg.weight_decay, self.cfg.seed, round_idx)
                   for cid in selected]
        G = GradientMatrix.from_columns([res.pseudo_grad for res in results], selected)
        return G, results

    def run_round_fedcome(self, round_idx):
        """One round with the consensus correction (FedAvg or FedSGD flavour)."""
        tic = time.perf_counter()
        selected = self.select(round_idx)
        G, results = self._train_selected(selected, round_idx)
        if self.cfg.is_partial and self.cfg.sampler.kind == 'anneal':
            self.table = update_table(self.table, selected, G, self.cfg.sampler.alpha)
        k_local = max(res.steps for res in results)
        cons = enforce_consensus(G, k_local, self.eta, tol=self.cfg.qp.tol, max_iter=self.cfg.qp.max_iter)
        self.theta = self.theta - self.cfg.eta_g * aggregate(cons.corrected)
        return self._finish_round(round_idx, selected, tic, cons.max_violation, cons.mean_drift, cons.qp_fallbacks)

    def run_round_baseline(self, round_idx):
        """FedAvg (sample-size weighted) or FedSGD (uniform) round on the raw pseudo-gradients."""
        tic = time.perf_counter()
        selected = self.select(round_idx)
        G, _ = self._train_selected(selected, round_idx)
        if self.cfg.method == 'fedavg':
            direction = weighted_aggregate(G, self.train_sizes[list(selected)])
        else:
            direction = aggregate(G)
        self.theta = self.theta - self.cfg.eta_g * direction
        max_violation = float(min(0., gram(G.G).min()))
        return self._finish_round(round_idx, selected, tic, max_violation, 0., 0)

    def _finish_round(self, round_idx, selected, tic, max_violation, mean_drift, fallbacks):
        self.eta *= self.cfg.lr_decay
        losses, accs = self.evaluate()
        record = RoundRecord(round=round_idx, selected=tuple(selected),
                             per_client_train_loss=losses, per_client_test_acc=accs,
                             weighted_acc=weighted_accuracy(accs, self.test_sizes),
                             max_violation=max_violation, mean_drift=mean_drift, qp_fallbacks=fallbacks,
                             wall_time_ms=int(round(1000 * (time.perf_counter() - tic))))
        logger.info("round %d: %d clients, weighted acc %.4f, max violation %.3e, drift %.3e, %d QP fallbacks",
                    round_idx, len(selected), record.weighted_acc, max_violation, mean_drift, fallbacks)
        self.records.append(record)
        return record

    def run_round(self, round_idx):
        if self.cfg.method in CONSENSUS_METHODS:
            return self.run_round_fedcome(round_idx)
        return self.run_round_baseline(round_idx)

    def run(self, progress=False):
        for round_idx in tqdm(range(1, self.cfg.rounds + 1), desc=self.cfg.method, disable=not progress):
            self.run_round(round_idx)
        return self.records


def run_experiment(cfg, clients, spec=None, progress=False):
    """
    Train a federation for cfg.rounds rounds.

    Returns:
        records:    One RoundRecord per round, rounds numbered from 1
    """
    system = FederatedSystem(cfg, clients, spec)
    logger.info("running %s for %d rounds on %d clients (%d per round)",
                cfg.method, cfg.rounds, system.num_clients, system.subset_size)
    return system.run(progress)
