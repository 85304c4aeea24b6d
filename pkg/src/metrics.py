import json
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from src.federation import RoundRecord, global_loss, weighted_accuracy
from src.utils import FormatError, IoError


logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.17g'
ROUND_COLUMNS = ['round', 'weighted_acc', 'max_violation', 'mean_drift', 'qp_fallbacks']
DEFAULT_BINS = 10
# loss rises smaller than this are not counted for idle clients
UPTICK_SLACK = 1e-4


@dataclass
class ExperimentLog:
    """Config snapshot plus the round records of one run; initial_losses are the round-0 client losses when known."""
    config_snapshot: dict
    num_clients: int
    records: list = field(default_factory=list)
    initial_losses: np.ndarray = None

    def __post_init__(self):
        rounds = [rec.round for rec in self.records]
        if rounds != sorted(rounds):
            raise ValueError("experiment log: records are not ordered by round")

    def loss_matrix(self):
        """(T [+1]) x N client losses, starting with the round-0 row when present."""
        rows = [rec.per_client_train_loss for rec in self.records]
        if self.initial_losses is not None:
            rows = [self.initial_losses] + rows
        if not rows:
            return np.zeros((0, self.num_clients))
        return np.vstack(rows)


def csv_columns(num_clients):
    return (ROUND_COLUMNS
            + [f'loss_c{cdx}' for cdx in range(num_clients)]
            + [f'acc_c{cdx}' for cdx in range(num_clients)])


def write_csv(log, path):
    """One row per round, floats written with 17 significant digits."""
    columns = csv_columns(log.num_clients)
    rows = [[rec.round, rec.weighted_acc, rec.max_violation, rec.mean_drift, rec.qp_fallbacks,
             *rec.per_client_train_loss, *rec.per_client_test_acc] for rec in log.records]
    df = pd.DataFrame(rows, columns=columns)
    df = df.astype({'round': np.int64, 'qp_fallbacks': np.int64})
    try:
        df.to_csv(path, mode='w', header=True, index=False, float_format=FLOAT_FORMAT)
    except OSError as err:
        raise IoError(f"{path}: cannot write round log ({err})") from err
    logger.info("wrote %d rounds to %s", len(rows), path)


def read_csv(path, num_clients=None):
    """Parse a round log back into RoundRecords (selection and wall time are not stored)."""
    try:
        df = pd.read_csv(path, float_precision='round_trip')
    except (OSError, pd.errors.EmptyDataError, pd.errors.ParserError) as err:
        raise FormatError(f"{path}: cannot read round log ({err})") from err
    if num_clients is None:
        num_clients = sum(col.startswith('loss_c') for col in df.columns)
    columns = csv_columns(num_clients)
    if list(df.columns) != columns:
        raise FormatError(f"{path}: unexpected columns {list(df.columns)}")
    loss_cols = columns[len(ROUND_COLUMNS):len(ROUND_COLUMNS) + num_clients]
    acc_cols = columns[len(ROUND_COLUMNS) + num_clients:]
    records = []
    for row in df.to_dict('records'):
        records.append(RoundRecord(round=int(row['round']), selected=(),
                                   per_client_train_loss=np.array([row[c] for c in loss_cols], dtype=np.float64),
                                   per_client_test_acc=np.array([row[c] for c in acc_cols], dtype=np.float64),
                                   weighted_acc=float(row['weighted_acc']),
                                   max_violation=float(row['max_violation']),
                                   mean_drift=float(row['mean_drift']),
                                   qp_fallbacks=int(row['qp_fallbacks'])))
    return records


def fairness_histogram(final_accs, num_bins=DEFAULT_BINS):
    """
    Client accuracy distribution over equal-width bins of [0, 1].

    Returns:
        bins:       List of ((low, high), count); the last bin includes 1.0
    """
    if num_bins < 1:
        raise ValueError(f"num_bins: must be positive, got {num_bins}")
    counts, edges = np.histogram(np.asarray(final_accs, dtype=np.float64), bins=num_bins, range=(0., 1.))
    return [((float(lo), float(hi)), int(cnt)) for lo, hi, cnt in zip(edges[:-1], edges[1:], counts)]


def _upticks(losses, slack):
    if losses.shape[0] < 2:
        return np.zeros(losses.shape[1:], dtype=np.int64)
    return np.sum(np.diff(losses, axis=0) > slack, axis=0)


def monotonicity_report(log, slack=0.):
    """Per-client count of rounds in which the training loss rose by more than `slack`."""
    return _upticks(log.loss_matrix(), slack).astype(np.int64)


def global_monotonicity_violations(log, sizes, slack=0.):
    """Rounds in which the sample-weighted global loss rose by more than `slack`."""
    losses = log.loss_matrix()
    series = np.array([global_loss(row, sizes) for row in losses])
    return int(_upticks(series[:, None], slack)[0]) if series.size else 0


def unselected_upticks(log, slack=0.):
    """Loss increases of clients that sat the round out; needs in-memory records with selections."""
    losses = log.loss_matrix()
    offset = 1 if log.initial_losses is not None else 0
    count = 0
    for rdx in range(1, losses.shape[0]):
        rec = log.records[rdx - offset]
        idle = np.setdiff1d(np.arange(log.num_clients), np.asarray(rec.selected, dtype=np.int64))
        count += int(np.sum(losses[rdx, idle] - losses[rdx - 1, idle] > slack))
    return count


def summarize(log, sizes, slack=1e-6, uptick_slack=UPTICK_SLACK, num_bins=DEFAULT_BINS):
    """
    Headline numbers of one run.

    Args:
        log:            ExperimentLog
        sizes:          Per-client test-set sizes weighting the final accuracy
        slack:          Loss rise counted as a violation in total_violations
        uptick_slack:   Loss rise counted as an uptick of an idle client
        num_bins:       Bins of the final-accuracy histogram

    Returns:
        summary:        JSON-ready dict
    """
    if log.records:
        final = log.records[-1]
        accs = final.per_client_test_acc
        final_weighted = weighted_accuracy(accs, sizes)
        mean_acc, std_acc = float(np.mean(accs)), float(np.std(accs))
        histogram = [{'low': lo, 'high': hi, 'count': cnt} for (lo, hi), cnt in fairness_histogram(accs, num_bins)]
    else:
        final_weighted = mean_acc = std_acc = float('nan')
        histogram = []
    return {
        'final_weighted_acc': final_weighted,
        'mean_final_acc': mean_acc,
        'acc_std': std_acc,
        'total_violations': int(monotonicity_report(log, slack).sum()),
        'unselected_upticks': unselected_upticks(log, uptick_slack),
        'fairness_histogram': histogram,
        'config_snapshot': log.config_snapshot,
    }


def write_summary(log, sizes, path, slack=1e-6):
    summary = summarize(log, sizes, slack)
    try:
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(summary, f, indent=2, sort_keys=True)
    except OSError as err:
        raise IoError(f"{path}: cannot write summary ({err})") from err
    logger.info("wrote summary to %s", path)
    return summary
