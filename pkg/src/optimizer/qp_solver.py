# dual-side QP solver for small dense problems, with a cvxpy backend for cross-checks

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

from src.numerics import as_matrix, as_vector
from src.utils import OracleError, ProblemError


logger = logging.getLogger(__name__)

STATUSES = ('optimal', 'max_iter', 'infeasible')
RIDGE_EPS = 1e-10
# sweeps without a better KKT residual before an attempt counts as stalled
STALL_SWEEPS = 200


@dataclass
class QpProblem:
    """min 1/2 a^T Q a + c^T a  s.t.  A a <= h"""
    Q: np.ndarray
    c: np.ndarray
    A: np.ndarray = None
    h: np.ndarray = None

    def __post_init__(self):
        try:
            self.Q = as_matrix(self.Q, 'Q')
            self.c = as_vector(self.c, 'c')
            m = self.c.size
            self.A = np.zeros((0, m)) if self.A is None else as_matrix(np.atleast_2d(self.A), 'A')
            self.h = np.zeros(0) if self.h is None else as_vector(np.atleast_1d(self.h), 'h')
        except ValueError as err:
            raise ProblemError(str(err)) from err
        if self.Q.shape != (m, m):
            raise ProblemError(f"Q: expected {m}x{m}, got {self.Q.shape}")
        if self.A.shape[1] != m or self.A.shape[0] != self.h.size:
            raise ProblemError(f"A/h: shapes {self.A.shape} and {self.h.shape} do not conform to {m} variables")
        scale = max(1., np.max(np.abs(self.Q), initial=0.))
        if np.max(np.abs(self.Q - self.Q.T), initial=0.) > 1e-12 * scale:
            raise ProblemError("Q: not symmetric")

    @property
    def n_vars(self):
        return self.c.size

    @property
    def n_cons(self):
        return self.h.size


@dataclass
class QpSolution:
    a: np.ndarray
    dual: np.ndarray
    status: str
    kkt_residual: float
    iterations: int = 0
    ridge: float = 0.


@dataclass
class KktReport:
    stationarity: float
    primal_feasibility: float
    complementarity: float
    dual_nonnegative: bool
    tol: float
    scale: float = 1.
    checks: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(self.checks.values())

    def as_rows(self):
        values = {'stationarity': self.stationarity,
                  'primal_feasibility': self.primal_feasibility,
                  'complementarity': self.complementarity,
                  'dual_nonnegative': float(self.dual_nonnegative)}
        return [(name, values[name], self.checks[name]) for name in values]


def objective(p, a):
    a = np.asarray(a, dtype=np.float64)
    return float(0.5 * a @ p.Q @ a + p.c @ a)


def certify_kkt(p, s, tol=1e-8):
    """
    Recompute the KKT residuals of a candidate solution from scratch.

    Args:
        p:          QpProblem
        s:          QpSolution (only `a` and `dual` are read)
        tol:        Tolerance; stationarity is scaled by max(1, ||c||_inf)

    Returns:
        report:     KktReport with each residual and its pass/fail flag
    """
    a = np.asarray(s.a, dtype=np.float64)
    lam = np.asarray(s.dual, dtype=np.float64)
    slack = p.A @ a - p.h
    stationarity = float(np.max(np.abs(p.Q @ a + p.c + p.A.T @ lam), initial=0.))
    primal = float(max(0., np.max(slack, initial=0.)))
    compl = float(np.max(np.abs(lam * slack), initial=0.))
    dual_ok = bool(np.all(lam >= 0.))
    scale = max(1., float(np.max(np.abs(p.c), initial=0.)))
    checks = {
        'stationarity': stationarity <= tol * scale,
        'primal_feasibility': primal <= tol,
        'complementarity': compl <= tol,
        'dual_nonnegative': dual_ok,
    }
    return KktReport(stationarity, primal, compl, dual_ok, tol, scale, checks)


def _residual(report):
    if not report.dual_nonnegative:
        return np.inf
    return max(report.stationarity / report.scale, report.primal_feasibility, report.complementarity)


def _unconstrained(p):
    a = linalg.lstsq(p.Q, -p.c, cond=None)[0]
    return a


def solve(p, tol=1e-8, max_iter=10000, warm_start=None):
    """
    Solve a convex QP by projected coordinate ascent on its Lagrange dual.

    The dual  min_{lam >= 0} 1/2 lam^T H lam + b^T lam,  H = A Q^-1 A^T,
    b = A Q^-1 c + h, is swept coordinate-wise with projection onto lam >= 0.
    After every sweep the positive coordinates are taken as the active set and
    the reduced system H_AA lam_A = -b_A is solved directly; the result is kept
    when it is dual-feasible. Only when the sweeps stall, or Q cannot be
    factored at all, is Q regularized with a ridge of RIDGE_EPS * trace(Q) / M
    and the sweeps restarted.

    Args:
        p:              QpProblem with symmetric PSD Q
        tol:            KKT tolerance (see certify_kkt)
        max_iter:       Maximum number of dual sweeps per attempt
        warm_start:     Optional initial multipliers

    Returns:
        solution:       QpSolution; status 'optimal' iff certify_kkt passes
    """
    m, n_cons = p.n_vars, p.n_cons
    if max_iter < 1:
        raise ProblemError(f"max_iter: must be positive, got {max_iter}")

    if n_cons == 0 or warm_start is None:
        a0 = _unconstrained(p)
        cand = QpSolution(a0, np.zeros(n_cons), 'optimal', 0.)
        report = certify_kkt(p, cand, tol)
        if report.passed:
            cand.kkt_residual = _residual(report)
            return cand
        if n_cons == 0:
            cand.status = 'max_iter'
            cand.kkt_residual = _residual(report)
            return cand

    best = None
    chol = _factor(p.Q, 0.)
    if chol is not None:
        best = _dual_sweeps(p, chol, 0., tol, max_iter, warm_start)
        if best.status == 'optimal':
            return best
    mean_diag = float(np.trace(p.Q)) / m
    ridge = RIDGE_EPS * (mean_diag if mean_diag > 0. else 1.)
    logger.debug("dual sweeps stalled (residual %.3e), retrying with ridge %.3e",
                 np.nan if best is None else best.kkt_residual, ridge)
    chol = _factor(p.Q, ridge)
    if chol is None:
        raise ProblemError("Q: not positive semidefinite")
    retry = _dual_sweeps(p, chol, ridge, tol, max_iter, warm_start)
    if best is None or retry.status == 'optimal' or retry.kkt_residual < best.kkt_residual:
        best = retry
    if best.status == 'optimal':
        return best

    best.status = 'infeasible' if _is_infeasible(p) else 'max_iter'
    logger.debug("QP stopped after max_iter=%d with status %s, residual %.3e",
                 max_iter, best.status, best.kkt_residual)
    return best


def _factor(Q, ridge):
    try:
        return linalg.cho_factor(Q + ridge * np.eye(Q.shape[0]), lower=True)
    except linalg.LinAlgError:
        return None


def _dual_sweeps(p, chol, ridge, tol, max_iter, warm_start):
    """Dual coordinate sweeps on a fixed factorization; stops early after STALL_SWEEPS sweeps without progress."""
    n_cons = p.n_cons
    L = np.tril(chol[0])
    R = linalg.solve_triangular(L, p.A.T, lower=True)
    w = linalg.solve_triangular(L, p.c, lower=True)
    H = R.T @ R
    H = 0.5 * (H + H.T)
    b = R.T @ w + p.h
    diag = np.diag(H).copy()
    diag_floor = 1e-14 * max(float(diag.max(initial=0.)), 1e-300)

    def primal(lam):
        return -linalg.cho_solve(chol, p.c + p.A.T @ lam)

    lam = np.zeros(n_cons) if warm_start is None else np.maximum(as_vector(warm_start, 'warm_start'), 0.)
    grad = H @ lam + b
    best, since_best = None, 0
    for it in range(1, max_iter + 1):
        for jdx in range(n_cons):
            if diag[jdx] <= diag_floor:
                continue
            new = max(0., lam[jdx] - grad[jdx] / diag[jdx])
            delta = new - lam[jdx]
            if delta != 0.:
                lam[jdx] = new
                grad += delta * H[:, jdx]

        active = lam > 0.
        if np.any(active):
            sub = linalg.lstsq(H[np.ix_(active, active)], -b[active], cond=None)[0]
            polished = np.zeros(n_cons)
            polished[active] = sub
            if np.all(sub >= 0.):
                polished_grad = H @ polished + b
                if np.all(polished_grad[~active] >= -tol):
                    lam, grad = polished, polished_grad

        cand = QpSolution(primal(lam), lam.copy(), 'optimal', 0., it, ridge)
        report = certify_kkt(p, cand, tol)
        cand.kkt_residual = _residual(report)
        if report.passed:
            logger.debug("QP solved in %d sweeps (residual %.3e, ridge %.1e)", it, cand.kkt_residual, ridge)
            return cand
        if best is None or cand.kkt_residual < best.kkt_residual:
            best, since_best = cand, 0
        else:
            since_best += 1
            if since_best >= STALL_SWEEPS:
                break
    best.status = 'max_iter'
    return best


def _is_infeasible(p):
    """Phase-one LP: is {a : A a <= h} empty?"""
    res = optimize.linprog(np.zeros(p.n_vars), A_ub=p.A, b_ub=p.h,
                           bounds=[(None, None)] * p.n_vars, method='highs')
    return res.status == 2


def cvxpy_solve(p):
    """
    Solve the same QP with cvxpy; reference backend for cross-checks.

    Returns:
        solution:       QpSolution with cvxpy's primal/dual values; status
                        'optimal' when cvxpy reports an optimal solution
    """
    import cvxpy
    from cvxpy.atoms.affine.wraps import psd_wrap

    a = cvxpy.Variable(p.n_vars)
    cost = 0.5 * cvxpy.quad_form(a, psd_wrap(p.Q)) + p.c @ a
    constrlist = []
    if p.n_cons:
        constrlist += [p.A @ a <= p.h]
    prob = cvxpy.Problem(cvxpy.Minimize(cost), constrlist)
    prob.solve(verbose=False)
    if prob.status in ('infeasible', 'infeasible_inaccurate'):
        return QpSolution(np.full(p.n_vars, np.nan), np.zeros(p.n_cons), 'infeasible', np.inf)
    values = np.asarray(a.value, dtype=np.float64).reshape(-1)
    dual = np.zeros(p.n_cons)
    if p.n_cons:
        dual = np.maximum(np.asarray(constrlist[0].dual_value, dtype=np.float64).reshape(-1), 0.)
    status = 'optimal' if prob.status == 'optimal' else 'max_iter'
    report = certify_kkt(p, QpSolution(values, dual, status, 0.))
    return QpSolution(values, dual, status, _residual(report))


def brute_force_oracle(p, box=2., step=1e-2, slack=1e-9):
    """
    Grid search over [-box, box]^M for the feasible point of least objective.

    Args:
        p:          QpProblem with at most 3 variables
        box:        Half-width of the search box
        step:       Grid spacing
        slack:      Allowed constraint violation (never more than `step`)

    Returns:
        a:          Best grid point
    """
    m = p.n_vars
    if m > 3:
        raise ProblemError(f"brute_force_oracle: {m} variables, grid search supports at most 3")
    slack = min(slack, step)
    axis = np.arange(-box, box + 0.5 * step, step)
    if m == 1:
        blocks = [axis[:, None]]
    else:
        rest = np.stack(np.meshgrid(*([axis] * (m - 1)), indexing='ij'), axis=-1).reshape(-1, m - 1)
        blocks = (np.column_stack([np.full(rest.shape[0], v), rest]) for v in axis)
    best_val, best_a = np.inf, None
    for block in blocks:
        if p.n_cons:
            block = block[np.all(block @ p.A.T - p.h <= slack, axis=1)]
        if block.shape[0] == 0:
            continue
        vals = 0.5 * np.einsum('ij,jk,ik->i', block, p.Q, block) + block @ p.c
        idx = int(np.argmin(vals))
        if vals[idx] < best_val:
            best_val, best_a = float(vals[idx]), block[idx].copy()
    if best_a is None:
        raise OracleError(f"no feasible grid point in [-{box}, {box}]^{m} at step {step}")
    return best_a
