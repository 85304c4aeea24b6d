"""
Similarity-driven client sampling: an EMA table of pairwise gradient cosines
and a simulated-annealing search for the least mutually similar subset.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd

from src.numerics import as_matrix, gram
from src.utils import ConfigError, DimensionError, FormatError, IoError, rng_stream


logger = logging.getLogger(__name__)


@dataclass
class SimilarityTable:
    S: np.ndarray

    def __post_init__(self):
        self.S = as_matrix(self.S, 'similarity table')
        if self.S.shape[0] != self.S.shape[1]:
            raise DimensionError(f"similarity table: expected a square matrix, got {self.S.shape}")

    @classmethod
    def zeros(cls, num_clients):
        return cls(np.zeros((num_clients, num_clients)))

    @property
    def N(self):
        return self.S.shape[0]

    def to_csv(self, path):
        df = pd.DataFrame(self.S, columns=[str(cdx) for cdx in range(self.N)])
        try:
            df.to_csv(path, mode='w', header=True, index=False, float_format='%.17g')
        except OSError as err:
            raise IoError(f"{path}: cannot write similarity table ({err})") from err

    @classmethod
    def from_csv(cls, path):
        try:
            df = pd.read_csv(path, float_precision='round_trip')
        except (OSError, pd.errors.EmptyDataError, pd.errors.ParserError) as err:
            raise FormatError(f"{path}: cannot read similarity table ({err})") from err
        S = df.to_numpy(dtype=np.float64)
        if S.shape[0] != S.shape[1]:
            raise FormatError(f"{path}: similarity table is {S.shape[0]}x{S.shape[1]}, expected square")
        if not np.all(np.isfinite(S)) or np.any(np.abs(S) > 1.):
            raise FormatError(f"{path}: similarity entries must be finite and within [-1, 1]")
        if not np.array_equal(S, S.T):
            raise FormatError(f"{path}: similarity table is not symmetric")
        return cls(S)


@dataclass(frozen=True)
class SamplerConfig:
    """
    Args:
        m:              Clients selected per round
        mu:             Fraction of the subset kept from annealing (exploitation)
        alpha:          EMA coefficient of the similarity table
        sa_iters:       Annealing iterations per round
        t0:             Initial temperature
        temp_decay:     Geometric temperature decay per iteration
        seed:           Seed of the annealing and exploration streams
    """
    m: int
    mu: float = 0.7
    alpha: float = 0.5
    sa_iters: int = 600
    t0: float = 1.0
    temp_decay: float = 0.99
    seed: int = 0

    def validate(self, num_clients=None, prefix='federation.sampler'):
        if self.m < 1:
            raise ConfigError(f"{prefix}.m: must be at least 1, got {self.m}")
        if num_clients is not None and self.m > num_clients:
            raise ConfigError(f"{prefix}.m: {self.m} exceeds the {num_clients} clients")
        if not 0. <= self.mu <= 1.:
            raise ConfigError(f"{prefix}.mu: must lie in [0, 1], got {self.mu}")
        if not 0. <= self.alpha <= 1.:
            raise ConfigError(f"{prefix}.alpha: must lie in [0, 1], got {self.alpha}")
        if self.sa_iters < 0:
            raise ConfigError(f"{prefix}.sa_iters: must be nonnegative, got {self.sa_iters}")
        if not self.t0 > 0.:
            raise ConfigError(f"{prefix}.t0: must be positive, got {self.t0}")
        if not 0. < self.temp_decay < 1.:
            raise ConfigError(f"{prefix}.temp_decay: must lie in (0, 1), got {self.temp_decay}")
        return self

    @property
    def num_kept(self):
        return int(math.floor(self.mu * self.m + 1e-9))


def _check_ids(S, ids):
    ids = np.asarray(sorted(int(cid) for cid in ids), dtype=np.int64)
    if ids.size and (ids[0] < 0 or ids[-1] >= S.N):
        raise IndexError(f"client id outside [0, {S.N})")
    return ids


def subset_energy(S, P):
    """Sum of S[i, j] over unordered pairs i < j inside P."""
    ids = _check_ids(S, P)
    if ids.size < 1:
        raise DimensionError("subset_energy: empty subset")
    block = S.S[np.ix_(ids, ids)]
    return float(np.triu(block, 1).sum())


def _anneal(S, members, cfg, rng):
    n = S.N
    in_set = np.zeros(n, dtype=bool)
    in_set[members] = True
    energy = subset_energy(S, members)
    best_energy, best = energy, members.copy()
    tau = cfg.t0
    for _ in range(cfg.sa_iters):
        out_pos = rng.integers(members.size)
        outsiders = np.flatnonzero(~in_set)
        incoming = outsiders[rng.integers(outsiders.size)]
        leaving = members[out_pos]
        rest = np.delete(members, out_pos)
        delta = float(S.S[incoming, rest].sum() - S.S[leaving, rest].sum())
        # Metropolis acceptance
        if delta <= 0. or rng.random() < math.exp(-delta / tau):
            members[out_pos] = incoming
            in_set[leaving], in_set[incoming] = False, True
            energy += delta
            if energy < best_energy:
                best_energy, best = energy, members.copy()
        tau *= cfg.temp_decay
    logger.debug("annealing finished at energy %.6f (best %.6f)", energy, best_energy)
    return best


def anneal_select(S, cfg, round_idx):
    """
    Pick cfg.m clients of low mutual similarity.

    Annealing swaps one member for one non-member per iteration, accepting by
    the Metropolis rule at temperature t0 * temp_decay^r, and keeps the best
    subset seen. Exploration then keeps floor(mu * m) random members of that
    subset and draws the remaining slots uniformly from all other clients.

    Args:
        S:              SimilarityTable
        cfg:            SamplerConfig
        round_idx:      Communication round (seeds the streams)

    Returns:
        selected:       Sorted tuple of cfg.m distinct client ids
    """
    cfg.validate(S.N)
    n, m = S.N, cfg.m
    if m == n:
        return tuple(range(n))
    keep = cfg.num_kept
    if keep > 0:
        rng = rng_stream(cfg.seed, 'anneal', round_idx)
        members = np.sort(rng.choice(n, size=m, replace=False))
        best = _anneal(S, members, cfg, rng)
    else:
        best = np.zeros(0, dtype=np.int64)
    if keep == m:
        return tuple(sorted(int(cid) for cid in best))
    explore = rng_stream(cfg.seed, 'explore', round_idx)
    kept = explore.choice(best, size=keep, replace=False) if keep else best
    pool = np.setdiff1d(np.arange(n), kept)
    fill = explore.choice(pool, size=m - keep, replace=False)
    return tuple(sorted(int(cid) for cid in np.concatenate([kept, fill])))


def random_select(num_clients, m, seed, round_idx):
    """Uniformly random m-subset; the baseline sampler."""
    if not 1 <= m <= num_clients:
        raise ConfigError(f"federation.sampler.m: must lie in [1, {num_clients}], got {m}")
    chosen = rng_stream(seed, 'random_sampler', round_idx).choice(num_clients, size=m, replace=False)
    return tuple(sorted(int(cid) for cid in chosen))


def cosine(gi, gj):
    gi = np.asarray(gi, dtype=np.float64)
    gj = np.asarray(gj, dtype=np.float64)
    if gi.shape != gj.shape:
        raise DimensionError(f"cosine: shapes {gi.shape} and {gj.shape} differ")
    ni, nj = np.linalg.norm(gi), np.linalg.norm(gj)
    if ni == 0. or nj == 0.:
        logger.warning("cosine of a zero-norm gradient taken as 0")
        return 0.
    return float(np.clip(gi @ gj / (ni * nj), -1., 1.))


def cosine_matrix(G):
    """Pairwise cosines of the columns of a GradientMatrix; zero columns give 0."""
    K = gram(G.G)
    norms = np.sqrt(np.diag(K))
    zero = norms == 0.
    if np.any(zero):
        logger.warning("clients %s sent zero-norm gradients; their similarities are taken as 0",
                       [G.client_ids[i] for i in np.flatnonzero(zero)])
    safe = np.where(zero, 1., norms)
    Q = np.clip(K / np.outer(safe, safe), -1., 1.)
    Q[zero, :] = 0.
    Q[:, zero] = 0.
    return Q


def update_table(S, P, gradients, alpha):
    """
    EMA update of the pairs inside P: S_ij <- alpha * S_ij + (1 - alpha) * cos(g_i, g_j).

    Args:
        S:              SimilarityTable (left untouched)
        P:              Participating client ids
        gradients:      GradientMatrix whose client ids are exactly P
        alpha:          EMA coefficient in [0, 1]

    Returns:
        table:          New SimilarityTable
    """
    if set(int(cid) for cid in P) != set(gradients.client_ids) or len(P) != gradients.num_clients:
        raise DimensionError(f"update_table: participants {sorted(P)} do not match gradient columns {list(gradients.client_ids)}")
    if not 0. <= alpha <= 1.:
        raise ConfigError(f"federation.sampler.alpha: must lie in [0, 1], got {alpha}")
    ids = _check_ids(S, gradients.client_ids)
    order = np.asarray(gradients.client_ids, dtype=np.int64)
    Q = cosine_matrix(gradients)
    new = S.S.copy()
    block = np.ix_(order, order)
    updated = alpha * S.S[block] + (1. - alpha) * Q
    off_diag = ~np.eye(ids.size, dtype=bool)
    new[block] = np.where(off_diag, updated, S.S[block])
    return SimilarityTable(new)
