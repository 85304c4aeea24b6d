import logging

import numpy as np
import pytest

from src.data.partition import ClientDataset
from src.federation import (FederatedSystem, FederationConfig, ModelSettings, SamplerSettings,
                            global_loss, local_train, run_experiment, weighted_accuracy)
from src.metrics import ExperimentLog, global_monotonicity_violations, monotonicity_report
from src.model import Batch, MlpClassifier
from src.sampler import SimilarityTable
from src.utils import ConfigError
from src.verify import descent_fixture


def _cfg(**kwargs):
    base = dict(method='fedcome', rounds=2, batch_size=5, eta=0.05, seed=0,
                model=ModelSettings(hidden_dims=(6,), activation='tanh'))
    return FederationConfig(**(base | kwargs))


class TestConfig:

    def test_negative_eta_names_field(self):
        with pytest.raises(ConfigError, match=r'federation\.eta.*η'):
            FederationConfig(eta=-1.).validate()

    @pytest.mark.parametrize('kwargs', [{'method': 'fedprox'}, {'eta_g': 0.}, {'lr_decay': 1.5},
                                        {'batch_size': 0}, {'participation': 'some'}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            FederationConfig(**kwargs).validate()

    def test_subset_size(self):
        cfg = FederationConfig(participation='partial', participation_ratio=0.2)
        assert cfg.subset_size(20) == 4
        assert FederationConfig(participation='partial', num_selected=3).subset_size(20) == 3
        assert FederationConfig().subset_size(20) == 20
        with pytest.raises(ConfigError):
            FederationConfig(participation='partial').validate(10)
        with pytest.raises(ConfigError):
            FederationConfig(participation='partial', num_selected=11).validate(10)

    def test_from_dict(self):
        cfg = FederationConfig.from_dict({'eta': 0.01, 'sampler': {'mu': 0.3}, 'model': {'hidden_dims': [4, 4]}})
        assert cfg.eta == 0.01 and cfg.sampler.mu == 0.3 and cfg.model.hidden_dims == (4, 4)
        assert cfg.sampler.alpha == 0.5
        assert cfg.as_dict()['model']['hidden_dims'] == [4, 4]
        with pytest.raises(ConfigError, match='federation.sampler.beta'):
            FederationConfig.from_dict({'sampler': {'beta': 1}})
        with pytest.raises(ConfigError, match='federation.gamma'):
            FederationConfig.from_dict({'gamma': 1})


class TestLocalTrain:

    def test_zero_learning_rate(self, small_clients, tiny_spec):
        clf = MlpClassifier(tiny_spec)
        theta = clf.init_params(0)
        res = local_train(clf, theta, small_clients[0], 2, 5, 0., 0., seed=0)
        np.testing.assert_array_equal(res.pseudo_grad, 0.)
        assert res.final_loss == clf.loss(theta, small_clients[0].train)

    def test_single_full_batch_step(self, small_clients, tiny_spec):
        clf = MlpClassifier(tiny_spec)
        theta = clf.init_params(1)
        ds = small_clients[1]
        res = local_train(clf, theta, ds, 1, None, 0.1, 1e-3, seed=0)
        expected = 0.1 * clf.grad(theta, ds.train) + 0.1 * 1e-3 * theta
        np.testing.assert_allclose(res.pseudo_grad, expected, rtol=1e-10, atol=1e-14)
        assert res.steps == 1

    def test_deterministic(self, small_clients, tiny_spec):
        clf = MlpClassifier(tiny_spec)
        theta = clf.init_params(2)
        a = local_train(clf, theta, small_clients[2], 3, 4, 0.05, 1e-3, seed=9, round_idx=4)
        b = local_train(clf, theta, small_clients[2], 3, 4, 0.05, 1e-3, seed=9, round_idx=4)
        np.testing.assert_array_equal(a.pseudo_grad, b.pseudo_grad)
        assert a.final_loss == b.final_loss
        assert a.steps == 3 * -(-small_clients[2].train.n // 4)

    def test_oversized_batch_is_full_batch(self, small_clients, tiny_spec, caplog):
        clf = MlpClassifier(tiny_spec)
        theta = clf.init_params(3)
        with caplog.at_level(logging.WARNING, logger='src.federation'):
            big = local_train(clf, theta, small_clients[0], 2, 1000, 0.1, 0., seed=0)
        full = local_train(clf, theta, small_clients[0], 2, None, 0.1, 0., seed=0)
        np.testing.assert_array_equal(big.pseudo_grad, full.pseudo_grad)
        assert 'clamped' in caplog.text


def test_weighted_accuracy():
    assert weighted_accuracy([0.2, 0.4], [5, 5]) == pytest.approx(0.3)
    assert weighted_accuracy([1., 0.], [3, 1]) == 0.75
    # a client without test samples does not pull the mean down
    assert weighted_accuracy([1., 0.], [3, 0]) == 1.
    with pytest.raises(ConfigError):
        weighted_accuracy([1., 0.], [3, -1])
    with pytest.raises(ConfigError, match='no client'):
        weighted_accuracy([1., 0.], [0, 0])


def test_global_loss():
    assert global_loss([1., 3.], [1, 3]) == 2.5


class TestExperiment:

    def test_zero_rounds(self, small_clients):
        assert run_experiment(_cfg(rounds=0), small_clients) == []

    def test_records(self, small_clients):
        records = run_experiment(_cfg(rounds=3), small_clients)
        assert [r.round for r in records] == [1, 2, 3]
        for rec in records:
            assert rec.selected == (0, 1, 2, 3)
            assert rec.per_client_train_loss.shape == (4,)
            assert 0. <= rec.weighted_acc <= 1.
            assert np.all(np.isfinite(rec.per_client_train_loss))

    @pytest.mark.parametrize('method', ['fedcome', 'fedavg', 'fedsgd', 'fedcome_sgd'])
    def test_rerun_is_identical(self, small_clients, method):
        a = run_experiment(_cfg(method=method), small_clients)
        b = run_experiment(_cfg(method=method), small_clients)
        for ra, rb in zip(a, b):
            np.testing.assert_array_equal(ra.per_client_train_loss, rb.per_client_train_loss)
            np.testing.assert_array_equal(ra.per_client_test_acc, rb.per_client_test_acc)
            assert (ra.max_violation, ra.mean_drift, ra.selected) == (rb.max_violation, rb.mean_drift, rb.selected)

    def test_learning_rate_decay(self, small_clients):
        system = FederatedSystem(_cfg(rounds=3, lr_decay=0.5), small_clients)
        system.run()
        assert system.eta == pytest.approx(0.05 * 0.125)

    def test_consensual_round_equals_fedsgd(self, blobs):
        # three clients holding the same data produce identical, hence consensual, gradients
        train, test = blobs.subset(np.arange(0, blobs.n, 2)), blobs.subset(np.arange(1, blobs.n, 2))
        clients = [ClientDataset(cid, train, test) for cid in range(3)]
        come = FederatedSystem(_cfg(method='fedcome_sgd', rounds=2), clients)
        sgd = FederatedSystem(_cfg(method='fedsgd', rounds=2), clients)
        for r in (1, 2):
            rc, rs = come.run_round(r), sgd.run_round(r)
            np.testing.assert_array_equal(come.theta, sgd.theta)
            np.testing.assert_array_equal(rc.per_client_train_loss, rs.per_client_train_loss)
            assert rc.qp_fallbacks == 0 and rc.mean_drift == 0.

    def test_fedavg_weights_by_sample_size(self, small_clients):
        system = FederatedSystem(_cfg(method='fedavg', rounds=1, batch_size=None), small_clients)
        theta0 = system.theta.copy()
        G, _ = system._train_selected((0, 1, 2, 3), 1)
        weights = system.train_sizes / system.train_sizes.sum()
        system.run_round(1)
        np.testing.assert_allclose(system.theta, theta0 - G.G @ weights, rtol=1e-12, atol=1e-15)

    def test_empty_test_split_carries_no_weight(self, blobs):
        train, test = blobs.subset(np.arange(0, blobs.n, 2)), blobs.subset(np.arange(1, blobs.n, 2))
        empty = Batch(np.zeros((0, blobs.features.shape[1])))
        clients = [ClientDataset(0, train.subset(np.arange(5)), empty), ClientDataset(1, train, test)]
        system = FederatedSystem(_cfg(rounds=1), clients)
        record = system.run_round(1)
        assert record.per_client_test_acc[0] == 0.
        assert record.weighted_acc == pytest.approx(record.per_client_test_acc[1])

    def test_no_test_samples_anywhere(self, blobs):
        empty = Batch(np.zeros((0, blobs.features.shape[1])))
        with pytest.raises(ConfigError, match='no client has a test sample'):
            FederatedSystem(_cfg(), [ClientDataset(0, blobs, empty)])

    def test_partial_participation(self, small_clients):
        cfg = _cfg(rounds=4, participation='partial', num_selected=2,
                   sampler=SamplerSettings(kind='anneal', sa_iters=50))
        system = FederatedSystem(cfg, small_clients)
        for rec in system.run():
            assert len(rec.selected) == 2
        # only co-selected pairs carry similarity
        assert np.count_nonzero(system.table.S) > 0
        np.testing.assert_array_equal(system.table.S, system.table.S.T)

    def test_random_sampler_leaves_table_untouched(self, small_clients):
        cfg = _cfg(rounds=2, participation='partial', num_selected=2, sampler=SamplerSettings(kind='random'))
        system = FederatedSystem(cfg, small_clients)
        system.run()
        np.testing.assert_array_equal(system.table.S, 0.)

    def test_restored_table_drives_first_selection(self, small_clients, tmp_path):
        S = np.full((4, 4), 0.5)
        S[0, 3] = S[3, 0] = -1.
        np.fill_diagonal(S, 0.)
        path = tmp_path / 'similarity.csv'
        SimilarityTable(S).to_csv(path)
        cfg = _cfg(rounds=1, participation='partial', num_selected=2,
                   sampler=SamplerSettings(kind='anneal', mu=1., sa_iters=200, table=str(path)))
        system = FederatedSystem(cfg, small_clients)
        np.testing.assert_array_equal(system.table.S, S)
        assert system.run_round(1).selected == (0, 3)

    def test_restored_table_must_match_clients(self, small_clients, tmp_path):
        path = tmp_path / 'similarity.csv'
        SimilarityTable.zeros(3).to_csv(path)
        cfg = _cfg(participation='partial', num_selected=2, sampler=SamplerSettings(table=str(path)))
        with pytest.raises(ConfigError, match='federation.sampler.table'):
            FederatedSystem(cfg, small_clients)

    def test_unselected_clients_do_not_influence_update(self, small_clients):
        cfg = _cfg(rounds=1, participation='partial', num_selected=2, sampler=SamplerSettings(kind='random'))
        reference = FederatedSystem(cfg, small_clients)
        reference.run_round(1)
        selected = set(reference.records[0].selected)
        mutated = [c if c.client_id in selected else
                   ClientDataset(c.client_id, Batch(c.train.features + 5., c.train.labels), c.test)
                   for c in small_clients]
        other = FederatedSystem(cfg, mutated)
        other.run_round(1)
        np.testing.assert_array_equal(reference.theta, other.theta)


@pytest.mark.slow
def test_fedsgd_mode_consensus_never_raises_client_losses():
    cfg, clients = descent_fixture(rounds=200)
    system = FederatedSystem(cfg, clients)
    records = system.run()
    log = ExperimentLog(cfg.as_dict(), len(clients), records, system.initial_losses)
    np.testing.assert_array_equal(monotonicity_report(log, 1e-6), 0)
    assert global_monotonicity_violations(log, system.train_sizes, 1e-6) == 0
    assert system.global_loss() < system.global_loss(system.initial_losses)


def test_short_descent_run():
    cfg, clients = descent_fixture(rounds=20)
    system = FederatedSystem(cfg, clients)
    records = system.run()
    log = ExperimentLog(cfg.as_dict(), len(clients), records, system.initial_losses)
    np.testing.assert_array_equal(monotonicity_report(log, 1e-6), 0)
