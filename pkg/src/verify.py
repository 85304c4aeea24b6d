"""
Property suites behind `RunSession.py verify <suite>`. Every check returns
(name, passed, detail); a suite passes iff all of its checks pass.
"""
import itertools
import logging
import time

import numpy as np
from scipy import stats

from src.consensus import GradientMatrix, consensus_violations, enforce_consensus
from src.data.generator import synth_dataset
from src.data.partition import PartitionSpec, pathological_partition
from src.federation import FederatedSystem, FederationConfig, ModelSettings
from src.metrics import ExperimentLog, global_monotonicity_violations, monotonicity_report
from src.optimizer import qp_solver
from src.sampler import SamplerConfig, SimilarityTable, anneal_select, subset_energy
from src.utils import ConfigError, OracleError


logger = logging.getLogger(__name__)

HAND_FIXTURES = {
    'unconstrained_1d': (qp_solver.QpProblem(np.eye(1), np.zeros(1)), np.zeros(1), np.zeros(0)),
    'halfplane_2d': (qp_solver.QpProblem(np.eye(2), -np.ones(2), np.ones((1, 2)), np.ones(1)),
                     np.array([0.5, 0.5]), np.array([0.5])),
    'active_bound_1d': (qp_solver.QpProblem(np.eye(1), np.ones(1), -np.eye(1), np.zeros(1)),
                        np.zeros(1), np.ones(1)),
}


def random_psd_problem(rng, max_vars=3, max_cons=4):
    """Random dense QP whose feasible set contains the origin."""
    m = int(rng.integers(1, max_vars + 1))
    p = int(rng.integers(0, max_cons + 1))
    B = rng.standard_normal((m, m))
    Q = B @ B.T
    Q = 0.5 * (Q + Q.T)
    A = rng.standard_normal((p, m))
    h = np.abs(rng.standard_normal(p))
    return qp_solver.QpProblem(Q, rng.standard_normal(m), A, h)


def check_qp(num_problems=200, oracle_step=0.05, seed=0):
    checks = []
    for name, (problem, a_ref, dual_ref) in HAND_FIXTURES.items():
        sol = qp_solver.solve(problem)
        report = qp_solver.certify_kkt(problem, sol, tol=1e-6)
        ok = (sol.status == 'optimal' and report.passed
              and np.allclose(sol.a, a_ref, atol=1e-8) and np.allclose(sol.dual, dual_ref, atol=1e-8))
        checks.append((f'hand fixture {name}', ok, f'a={np.round(sol.a, 10).tolist()}'))

    rng = np.random.default_rng(seed)
    worst_gap, worst_kkt, failures = -np.inf, 0., 0
    for _ in range(num_problems):
        problem = random_psd_problem(rng)
        sol = qp_solver.solve(problem)
        report = qp_solver.certify_kkt(problem, sol, tol=1e-6)
        oracle = qp_solver.brute_force_oracle(problem, box=2., step=oracle_step)
        gap = qp_solver.objective(problem, sol.a) - qp_solver.objective(problem, oracle)
        worst_gap = max(worst_gap, gap)
        worst_kkt = max(worst_kkt, sol.kkt_residual)
        failures += int(not report.passed or gap > 1e-3)
    checks.append(('random PSD problems match grid oracle', failures == 0,
                   f'{failures}/{num_problems} failures, worst gap {worst_gap:.2e}, worst KKT {worst_kkt:.2e}'))
    try:
        qp_solver.brute_force_oracle(qp_solver.QpProblem(np.eye(1), np.zeros(1), np.eye(1), -5. * np.ones(1)), box=1.)
        checks.append(('oracle rejects empty grid', False, 'no OracleError'))
    except OracleError:
        checks.append(('oracle rejects empty grid', True, ''))

    try:
        worse = 0
        for _ in range(20):
            problem = random_psd_problem(rng)
            ref = qp_solver.cvxpy_solve(problem)
            ours = qp_solver.solve(problem)
            worse += int(ref.status != 'optimal'
                         or qp_solver.objective(problem, ours.a) > qp_solver.objective(problem, ref.a) + 1e-6)
        checks.append(('agrees with the cvxpy backend', worse == 0, f'{worse}/20 disagreements'))
    except ImportError:
        logger.info("cvxpy not installed, skipping backend cross-check")
    return checks


def check_consensus(num_instances=100, seed=0, eps_c=1e-6):
    rng = np.random.default_rng(seed)
    worst, failures = 0., 0
    tic = time.perf_counter()
    for _ in range(num_instances):
        d = int(rng.integers(2, 101))
        m = int(rng.integers(2, 21))
        G = GradientMatrix(rng.standard_normal((d, m)), tuple(range(m)))
        res = enforce_consensus(G)
        corrected = res.corrected.G
        dots = corrected.T @ G.G
        bound = -eps_c * np.outer(np.linalg.norm(corrected, axis=0), np.linalg.norm(G.G, axis=0))
        slack = float(np.min(dots - bound))
        worst = min(worst, slack)
        failures += int(slack < 0.)
    elapsed = time.perf_counter() - tic
    checks = [('pairwise consensus after correction', failures == 0,
               f'{failures}/{num_instances} failures, {elapsed:.1f}s')]

    identity_ok = True
    for _ in range(20):
        d, m = int(rng.integers(2, 30)), int(rng.integers(2, 8))
        G = GradientMatrix(np.abs(rng.standard_normal((d, m))), tuple(range(m)))
        if consensus_violations(G):
            continue
        res = enforce_consensus(G)
        err = np.linalg.norm(res.corrected.G - G.G, axis=0)
        identity_ok &= bool(np.all(err <= 1e-8 * np.linalg.norm(G.G, axis=0)))
    checks.append(('identity on consensual inputs', identity_ok, ''))

    gap_failures = 0
    for _ in range(10):
        m = int(rng.integers(2, 4))
        G = GradientMatrix(rng.standard_normal((int(rng.integers(2, 6)), m)), tuple(range(m)))
        K = G.G.T @ G.G
        res = enforce_consensus(G)
        for i in range(m):
            problem = qp_solver.QpProblem(K, -K[:, i], -K, np.zeros(m))
            oracle = qp_solver.brute_force_oracle(problem, box=2., step=0.05)
            gap = qp_solver.objective(problem, res.coefficients[:, i]) - qp_solver.objective(problem, oracle)
            gap_failures += int(gap > 1e-3)
    checks.append(('minimal deviation against grid oracle', gap_failures == 0, f'{gap_failures} failures'))

    descent_ok = True
    for _ in range(20):
        d, m = int(rng.integers(2, 50)), int(rng.integers(2, 12))
        G = GradientMatrix(rng.standard_normal((d, m)), tuple(range(m)))
        corrected = enforce_consensus(G).corrected.G
        mean = corrected.mean(axis=1)
        tol = 1e-6 * np.mean(np.linalg.norm(corrected, axis=0)) * np.linalg.norm(G.G, axis=0)
        descent_ok &= bool(np.all(G.G.T @ mean >= -tol))
    checks.append(('mean correction is a common descent direction', descent_ok, ''))
    return checks


def descent_fixture(rounds=200, seed=0):
    """Ten single-class clients on synthetic blobs, FedSGD-mode consensus at eta = 0.01."""
    full = synth_dataset(num_classes=10, samples_per_class=21, dim=10, separation=3., seed=seed)
    clients = pathological_partition(full, PartitionSpec(num_clients=10, classes_per_client=1, seed=seed))
    cfg = FederationConfig(method='fedcome_sgd', rounds=rounds, eta=0.01, lr_decay=1., weight_decay=0.,
                           seed=seed, model=ModelSettings(hidden_dims=(16,), activation='tanh'))
    return cfg, clients


def check_descent(rounds=200, seed=0, slack=1e-6):
    cfg, clients = descent_fixture(rounds, seed)
    system = FederatedSystem(cfg, clients)
    records = system.run()
    log = ExperimentLog(cfg.as_dict(), len(clients), records, system.initial_losses)
    per_client = monotonicity_report(log, slack)
    global_count = global_monotonicity_violations(log, system.train_sizes, slack)
    first, last = system.global_loss(system.initial_losses), system.global_loss(records[-1].per_client_train_loss)
    return [
        ('per-client loss non-increasing', int(per_client.sum()) == 0, f'violations {per_client.tolist()}'),
        ('global loss non-increasing', global_count == 0, f'{global_count} violations, loss {first:.4f} -> {last:.4f}'),
        ('no consensus violations', all(rec.max_violation >= -1e-6 for rec in records), ''),
    ]


def exhaustive_minimum(S, m):
    return min(subset_energy(S, subset) for subset in itertools.combinations(range(S.N), m))


def random_table(rng, n):
    upper = np.triu(rng.uniform(-1., 1., size=(n, n)), 1)
    return SimilarityTable(upper + upper.T)


def check_sampler(runs=100, draws=10000, seed=0):
    rng = np.random.default_rng(seed)
    checks = []

    energy_ok = True
    for n, m in [(6, 2), (8, 3), (10, 4)]:
        S = random_table(rng, n)
        for subset in itertools.combinations(range(n), m):
            brute = sum(S.S[i, j] for i, j in itertools.combinations(subset, 2))
            energy_ok &= bool(abs(subset_energy(S, subset) - brute) <= 1e-12)
    checks.append(('subset energy matches pair enumeration', energy_ok, ''))

    hits, total = 0, 0
    distinct_ok = True
    for n, m in [(8, 3), (10, 4)]:
        S = random_table(rng, n)
        best = exhaustive_minimum(S, m)
        for run in range(runs):
            cfg = SamplerConfig(m=m, mu=1., seed=run)
            chosen = anneal_select(S, cfg, round_idx=0)
            distinct_ok &= len(set(chosen)) == m
            hits += int(subset_energy(S, chosen) <= best + 1e-9)
            total += 1
    checks.append(('annealing finds the exhaustive minimum', hits >= 0.95 * total, f'{hits}/{total} runs'))
    checks.append(('selections have m distinct ids', distinct_ok, ''))

    n, m = 6, 2
    cfg = SamplerConfig(m=m, mu=0., seed=seed)
    S = SimilarityTable.zeros(n)
    index = {subset: k for k, subset in enumerate(itertools.combinations(range(n), m))}
    counts = np.zeros(len(index))
    for draw in range(draws):
        counts[index[anneal_select(S, cfg, draw)]] += 1
    pvalue = float(stats.chisquare(counts).pvalue)
    checks.append(('mu = 0 is uniform over subsets', pvalue > 0.01, f'chi-square p = {pvalue:.3f}'))
    return checks


SUITES = {
    'qp': check_qp,
    'consensus': check_consensus,
    'descent': check_descent,
    'sampler': check_sampler,
}


def run_suite(name):
    """Run one suite, print a PASS/FAIL line per property and return whether all passed."""
    if name not in SUITES:
        raise ConfigError(f"suite: unknown suite '{name}', expected one of {sorted(SUITES)}")
    tic = time.perf_counter()
    checks = SUITES[name]()
    for prop, passed, detail in checks:
        print(f"{'PASS' if passed else 'FAIL'}  {prop}" + (f"  ({detail})" if detail else ''))
    ok = all(passed for _, passed, _ in checks)
    logger.info("suite %s %s in %.1fs", name, 'passed' if ok else 'failed', time.perf_counter() - tic)
    return ok
