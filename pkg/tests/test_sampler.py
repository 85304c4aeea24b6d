import itertools
import logging

import numpy as np
import pytest
from scipy import stats

from src.consensus import GradientMatrix
from src.sampler import (SamplerConfig, SimilarityTable, anneal_select, cosine, random_select,
                         subset_energy, update_table)
from src.utils import ConfigError, DimensionError, FormatError
from src.verify import exhaustive_minimum, random_table


class TestEnergy:

    def test_examples(self):
        S = SimilarityTable.zeros(4)
        assert subset_energy(S, {2}) == 0.
        assert subset_energy(S, {0, 1, 3}) == 0.
        S.S[1, 2] = S.S[2, 1] = 0.3
        assert subset_energy(S, {1, 2}) == pytest.approx(0.3)

    def test_matches_pair_enumeration(self, rng):
        S = random_table(rng, 8)
        for subset in itertools.combinations(range(8), 3):
            expected = sum(S.S[i, j] for i, j in itertools.combinations(subset, 2))
            assert subset_energy(S, subset) == pytest.approx(expected, abs=1e-12)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            subset_energy(SimilarityTable.zeros(3), {0, 3})
        with pytest.raises(IndexError):
            subset_energy(SimilarityTable.zeros(3), {-1, 0})

    def test_monotone_under_nonnegative_addition(self, rng):
        S = SimilarityTable(np.abs(random_table(rng, 6).S))
        assert subset_energy(S, {0, 1, 2}) <= subset_energy(S, {0, 1, 2, 4})


class TestAnneal:

    def test_flat_landscape(self):
        chosen = anneal_select(SimilarityTable.zeros(6), SamplerConfig(m=3, mu=1.), round_idx=0)
        assert len(set(chosen)) == 3
        assert subset_energy(SimilarityTable.zeros(6), chosen) == 0.

    def test_single_negative_pair(self):
        S = np.full((6, 6), 0.5)
        np.fill_diagonal(S, 0.)
        S[0, 5] = S[5, 0] = -1.
        assert anneal_select(SimilarityTable(S), SamplerConfig(m=2, mu=1.), round_idx=0) == (0, 5)

    def test_finds_exhaustive_minimum(self, rng):
        hits = 0
        for n, m in [(8, 3), (10, 4)]:
            S = random_table(rng, n)
            best = exhaustive_minimum(S, m)
            for seed in range(50):
                chosen = anneal_select(S, SamplerConfig(m=m, mu=1., seed=seed), round_idx=0)
                assert len(set(chosen)) == m
                hits += subset_energy(S, chosen) <= best + 1e-9
        assert hits >= 95

    def test_uniform_when_mu_zero(self):
        n, m, draws = 6, 2, 10000
        cfg = SamplerConfig(m=m, mu=0., seed=0)
        index = {subset: k for k, subset in enumerate(itertools.combinations(range(n), m))}
        counts = np.zeros(len(index))
        for draw in range(draws):
            counts[index[anneal_select(SimilarityTable.zeros(n), cfg, draw)]] += 1
        assert stats.chisquare(counts).pvalue > 0.01

    def test_exploration_keeps_floor_mu_m(self):
        S = np.full((10, 10), 0.5)
        np.fill_diagonal(S, 0.)
        S[:3, :3] = -1.
        cfg = SamplerConfig(m=3, mu=0.7, seed=4)
        assert cfg.num_kept == 2
        for round_idx in range(20):
            chosen = anneal_select(SimilarityTable(S), cfg, round_idx)
            assert len(set(chosen)) == 3
            assert len(set(chosen) & {0, 1, 2}) >= 2

    def test_deterministic_and_round_dependent(self, rng):
        S = random_table(rng, 10)
        cfg = SamplerConfig(m=4, mu=0.5, seed=1)
        assert anneal_select(S, cfg, 3) == anneal_select(S, cfg, 3)
        assert len({anneal_select(S, cfg, r) for r in range(10)}) > 1

    def test_everyone_selected(self):
        assert anneal_select(SimilarityTable.zeros(4), SamplerConfig(m=4), 0) == (0, 1, 2, 3)

    def test_subset_larger_than_population(self):
        with pytest.raises(ConfigError):
            anneal_select(SimilarityTable.zeros(3), SamplerConfig(m=4), 0)

    @pytest.mark.parametrize('kwargs', [{'m': 0}, {'m': 2, 'mu': 1.5}, {'m': 2, 'alpha': -0.1},
                                        {'m': 2, 't0': 0.}, {'m': 2, 'temp_decay': 1.}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            SamplerConfig(**kwargs).validate(5)


def test_random_select():
    chosen = random_select(10, 3, seed=2, round_idx=5)
    assert chosen == random_select(10, 3, seed=2, round_idx=5)
    assert len(set(chosen)) == 3 and all(0 <= c < 10 for c in chosen)
    with pytest.raises(ConfigError):
        random_select(3, 4, seed=0, round_idx=0)


class TestCosine:

    def test_examples(self):
        g = np.array([0.3, -1.2, 2.])
        assert cosine(g, g) == pytest.approx(1.)
        assert cosine([1., 0.], [0., 1.]) == 0.
        assert cosine(g, -g) == pytest.approx(-1.)
        assert -1. <= cosine(g, 3. * g) <= 1.

    def test_zero_norm(self, caplog):
        with caplog.at_level(logging.WARNING, logger='src.sampler'):
            assert cosine([0., 0.], [1., 2.]) == 0.
        assert 'zero-norm' in caplog.text


class TestUpdate:

    def _gradients(self, cols, ids):
        return GradientMatrix.from_columns(cols, ids)

    def test_ema_examples(self):
        G = self._gradients([[1., 0.], [2., 0.]], (1, 3))
        S = SimilarityTable.zeros(4)
        assert update_table(S, {1, 3}, G, 0.5).S[1, 3] == 0.5
        assert update_table(S, {1, 3}, G, 0.).S[3, 1] == 1.
        S.S[1, 3] = S.S[3, 1] = -0.25
        assert update_table(S, {1, 3}, G, 1.).S[1, 3] == -0.25

    def test_pairs_outside_untouched(self, rng):
        S = random_table(rng, 6)
        G = self._gradients(list(rng.standard_normal((3, 4))), (0, 2, 5))
        new = update_table(S, (0, 2, 5), G, 0.3)
        mask = np.zeros((6, 6), dtype=bool)
        mask[np.ix_([0, 2, 5], [0, 2, 5])] = True
        np.testing.assert_array_equal(new.S[~mask], S.S[~mask])
        np.testing.assert_array_equal(new.S, new.S.T)
        np.testing.assert_array_equal(np.diag(new.S), np.diag(S.S))

    def test_stays_in_range(self, rng):
        S = SimilarityTable.zeros(5)
        for _ in range(50):
            ids = tuple(sorted(rng.choice(5, size=3, replace=False)))
            S = update_table(S, ids, self._gradients(list(rng.standard_normal((3, 7))), ids), 0.5)
        assert np.all(np.abs(S.S) <= 1.)
        np.testing.assert_array_equal(S.S, S.S.T)

    def test_input_not_mutated(self):
        S = SimilarityTable.zeros(3)
        update_table(S, (0, 1), self._gradients([[1., 0.], [1., 1.]], (0, 1)), 0.5)
        np.testing.assert_array_equal(S.S, 0.)

    def test_mismatch(self):
        G = self._gradients([[1., 0.], [0., 1.]], (0, 1))
        with pytest.raises(DimensionError):
            update_table(SimilarityTable.zeros(3), (0, 2), G, 0.5)


class TestTableCsv:

    def test_round_trip(self, tmp_path, rng):
        S = random_table(rng, 5)
        path = tmp_path / 'similarity.csv'
        S.to_csv(path)
        np.testing.assert_array_equal(SimilarityTable.from_csv(path).S, S.S)

    def test_rejects_asymmetric(self, tmp_path):
        path = tmp_path / 'similarity.csv'
        path.write_text('0,1\n0,0.5\n0.25,0\n', encoding='utf-8')
        with pytest.raises(FormatError):
            SimilarityTable.from_csv(path)
