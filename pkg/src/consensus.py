import logging
from dataclasses import dataclass

import numpy as np

from src.numerics import as_matrix, gram
from src.optimizer import qp_solver
from src.utils import DimensionError


logger = logging.getLogger(__name__)

EPS_CONSENSUS = 1e-6


@dataclass
class GradientMatrix:
    """d x M matrix whose column i is the (pseudo-)gradient of client client_ids[i]."""
    G: np.ndarray
    client_ids: tuple

    def __post_init__(self):
        self.G = as_matrix(self.G, 'gradients')
        self.client_ids = tuple(int(cid) for cid in self.client_ids)
        d, m = self.G.shape
        if d < 1 or m < 1:
            raise DimensionError(f"gradients: need d >= 1 and M >= 1, got shape {self.G.shape}")
        if len(self.client_ids) != m:
            raise DimensionError(f"gradients: {m} columns but {len(self.client_ids)} client ids")
        if len(set(self.client_ids)) != m:
            raise DimensionError("gradients: client ids are not distinct")

    @classmethod
    def from_columns(cls, columns, client_ids=None):
        columns = [np.asarray(col, dtype=np.float64) for col in columns]
        if not columns:
            raise DimensionError("gradients: no columns")
        if client_ids is None:
            client_ids = range(len(columns))
        return cls(np.column_stack(columns), tuple(client_ids))

    @property
    def dim(self):
        return self.G.shape[0]

    @property
    def num_clients(self):
        return self.G.shape[1]

    def column(self, i):
        return self.G[:, i]


@dataclass
class ConsensusResult:
    corrected: GradientMatrix
    coefficients: np.ndarray
    max_violation: float
    drift: np.ndarray
    fallback: np.ndarray

    @property
    def qp_fallbacks(self):
        return int(np.count_nonzero(self.fallback))

    @property
    def mean_drift(self):
        return float(np.mean(self.drift))


def consensus_violations(G):
    """
    All ordered client pairs whose gradients conflict.

    Returns:
        violations:     list of (client_i, client_j, g_i . g_j) with negative
                        products, ascending by product
    """
    K = gram(G.G)
    m = G.num_clients
    pairs = [(G.client_ids[i], G.client_ids[j], float(K[i, j]))
             for i in range(m) for j in range(m) if i != j and K[i, j] < 0.]
    return sorted(pairs, key=lambda item: (item[2], item[0], item[1]))


def _satisfies(corrected_col, G, norms, eps_c):
    dots = G.T @ corrected_col
    bound = -eps_c * np.linalg.norm(corrected_col) * norms
    return bool(np.all(dots >= bound))


def _scaled_fallback(i, G, norms, eps_c):
    """Largest beta in {1, 1/2, 1/4, ...} keeping beta * g_i consensual; beta = 0 always qualifies."""
    g = G[:, i]
    for k in range(31):
        beta = 0.5 ** k
        if _satisfies(beta * g, G, norms, eps_c):
            return beta
    return 0.


def enforce_consensus(G, k_local=1, eta=1., tol=1e-8, max_iter=10000, eps_c=EPS_CONSENSUS):
    """
    Correct every client gradient so that it agrees with all original ones.

    For client i the coefficients a_i solve
        min 1/2 a^T K a - (K e_i)^T a   s.t.   -K a <= 0,
    with K = G^T G, and the corrected gradient is G a_i. Each QP is solved on
    the cosine matrix of the nonzero columns (every column scaled to unit norm
    and the target to unit length), so the solver tolerance is relative to the
    norms of both clients involved; the corrected gradient does not change.

    Args:
        G:              GradientMatrix of the round's participants
        k_local:        Local steps behind each pseudo-gradient (drift normalization)
        eta:            Local learning rate (drift normalization)
        tol, max_iter:  QP solver settings
        eps_c:          Relative slack of the consensus check

    Returns:
        result:         ConsensusResult with corrected gradients in the input order
    """
    if k_local < 1 or not eta > 0:
        raise DimensionError(f"enforce_consensus: need k_local >= 1 and eta > 0, got {k_local}, {eta}")
    raw = G.G
    d, m = raw.shape
    K = gram(raw)
    norms = np.sqrt(np.maximum(np.diag(K), 0.))
    coefficients = np.eye(m)
    corrected = raw.copy()
    fallback = np.zeros(m, dtype=bool)
    live = np.flatnonzero(norms > 0.)
    if live.size:
        cos = K[np.ix_(live, live)] / np.outer(norms[live], norms[live])
        cos = 0.5 * (cos + cos.T)
        for pos, i in enumerate(live):
            if np.all(cos[pos] >= 0.):
                # e_i is the unconstrained minimizer and it is feasible
                continue
            problem = qp_solver.QpProblem(cos, -cos[:, pos], -cos, np.zeros(live.size))
            sol = qp_solver.solve(problem, tol=tol, max_iter=max_iter)
            a = np.zeros(m)
            a[live] = sol.a * norms[i] / norms[live]
            candidate = raw @ a
            if sol.status == 'optimal' and _satisfies(candidate, raw, norms, eps_c):
                coefficients[:, i] = a
                corrected[:, i] = candidate
                continue
            beta = _scaled_fallback(i, raw, norms, eps_c)
            logger.warning("QP for client %d ended with status '%s' (residual %.3e); falling back to %.3g * g_i",
                           G.client_ids[i], sol.status, sol.kkt_residual, beta)
            fallback[i] = True
            coefficients[:, i] = beta * np.eye(m)[:, i]
            corrected[:, i] = beta * raw[:, i]

    cross = corrected.T @ raw
    max_violation = float(min(0., cross.min()))
    drift = np.linalg.norm(corrected - raw, axis=0) / (k_local * eta)
    logger.debug("consensus: %d clients, max violation %.3e, mean drift %.3e, %d fallbacks",
                 m, max_violation, float(drift.mean()), int(fallback.sum()))
    return ConsensusResult(GradientMatrix(corrected, G.client_ids), coefficients,
                           max_violation, drift, fallback)


def aggregate(corrected):
    """Uniform mean of the corrected gradients."""
    return np.mean(corrected.G, axis=1)


def weighted_aggregate(gradients, weights):
    """Weighted mean of the columns; weights need not be normalized."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (gradients.num_clients,):
        raise DimensionError(f"weights: expected {gradients.num_clients} entries, got shape {weights.shape}")
    return gradients.G @ (weights / weights.sum())
