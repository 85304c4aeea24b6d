import numpy as np



translation_table = str.maketrans('', '', ''.join(["'", ":", "{", "}", ",", "[", "]"]))

# Stream purposes of the hierarchical RNG; the integer is the first spawn key.
RNG_PURPOSES = {
    'init': 0,
    'local': 1,
    'anneal': 2,
    'explore': 3,
    'random_sampler': 4,
    'partition': 5,
    'data': 6,
}


class DimensionError(ValueError):
    """Non-conformable shapes or non-finite entries."""


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


class ProblemError(ValueError):
    """Malformed QP problem."""


class OracleError(ValueError):
    """Brute-force oracle found no feasible grid point."""


class FormatError(ValueError):
    """Malformed input file."""


class IoError(OSError):
    """Failure writing experiment output."""


def rng_stream(seed, purpose, round_idx=0, client=0):
    """
    Independent random generator for one (purpose, round, client) triple.

    Args:
        seed:           Experiment seed
        purpose:        Key of RNG_PURPOSES
        round_idx:      Communication round
        client:         Client id (0 when the stream is not per-client)

    Returns:
        numpy Generator seeded from SeedSequence(seed, spawn_key=(purpose, round, client))
    """
    if purpose not in RNG_PURPOSES:
        raise KeyError(f"Unknown RNG purpose '{purpose}'")
    ss = np.random.SeedSequence(int(seed), spawn_key=(RNG_PURPOSES[purpose], int(round_idx), int(client)))
    return np.random.default_rng(ss)
