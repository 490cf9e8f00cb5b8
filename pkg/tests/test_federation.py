import math

import numpy as np
import pytest

from fedsurv.federation import (
    ClientState,
    FederationConfig,
    RoundFailureError,
    aggregate,
    local_train,
    run_centralized,
    run_federated,
    sample_clients,
)
from fedsurv.grid import TimeGrid, discretize_dataset
from fedsurv.network import HazardNetwork, batch_gradient, per_sample_gradients
from fedsurv.privacy import BdpConfig, BdpLedger, DpConfig, RdpLedger
from fedsurv.rng import derive_rng


GRID = TimeGrid.monthly(3)


def make_client(cid, n, seed, d=2):
    rng = derive_rng(seed, cid)
    x = rng.normal(size=(n, d))
    times = rng.uniform(0, 4, n)
    events = (rng.uniform(size=n) < 0.7).astype(int)
    survived, failed = discretize_dataset(times, events, GRID)
    return ClientState(cid, x, survived, failed)


def small_model(seed=0, d=2):
    return HazardNetwork.initialize((d, 4, GRID.n_intervals), derive_rng(seed, "init"))


class TestSampleClients:
    def test_full_participation(self):
        assert sample_clients(7, 1.0, derive_rng(0)) == list(range(7))

    def test_floor_rule(self):
        assert len(sample_clients(10, 0.35, derive_rng(1))) == 3

    def test_minimum_one(self):
        assert len(sample_clients(5, 0.01, derive_rng(2))) == 1

    def test_deterministic_under_seed(self):
        a = sample_clients(20, 0.4, derive_rng(3, "sample"))
        b = sample_clients(20, 0.4, derive_rng(3, "sample"))
        assert a == b

    def test_rejects_zero_clients(self):
        with pytest.raises(ValueError):
            sample_clients(0, 1.0, derive_rng(4))


class TestLocalTrain:
    def test_full_batch_descent_matches_hand_loop(self):
        client = make_client("a", 24, 11)
        model = small_model(1)
        epochs = 3
        lr = 0.05
        config = FederationConfig(
            rounds=1, local_epochs=epochs, batch_size=24,
            learning_rate=lr, optimizer="sgd", regime="none",
        )
        trained, _, spend = local_train(client, model, config)

        params = model.params.copy()
        for _ in range(epochs):
            grad = batch_gradient(
                HazardNetwork(model.layer_dims, params),
                client.x, client.survived, client.failed,
            ) / client.n_records
            params = params - lr * grad
        np.testing.assert_allclose(trained.params, params, rtol=1e-12, atol=1e-14)
        assert spend.regime == "none"

    def test_sigma_zero_matches_clipped_descent(self):
        client = make_client("b", 16, 12)
        model = small_model(2)
        lr, clip_norm = 0.1, 0.05
        config = FederationConfig(
            rounds=1, local_epochs=2, batch_size=16,
            learning_rate=lr, optimizer="sgd", regime="classical",
        )
        dp = DpConfig(clip_norm=clip_norm, noise_multiplier=0.0)
        trained, _, _ = local_train(client, model, config, dp=dp)

        params = model.params.copy()
        for _ in range(2):
            per_sample = per_sample_gradients(
                HazardNetwork(model.layer_dims, params),
                client.x, client.survived, client.failed,
            )
            norms = np.linalg.norm(per_sample, axis=1)
            clipped = per_sample / np.maximum(1.0, norms / clip_norm)[:, None]
            params = params - lr * clipped.mean(axis=0)
        np.testing.assert_allclose(trained.params, params, rtol=1e-12, atol=1e-14)

    def test_zero_epochs_returns_model_unchanged(self):
        client = make_client("c", 10, 13)
        model = small_model(3)
        config = FederationConfig(
            rounds=1, local_epochs=0, batch_size=4, regime="classical"
        )
        client.ledger = RdpLedger()
        trained, loss, spend = local_train(
            client, model, config, dp=DpConfig(noise_multiplier=1.0)
        )
        np.testing.assert_array_equal(trained.params, model.params)
        assert spend.epsilon == pytest.approx(math.log(1e5) / 63)  # conversion floor
        assert client.ledger.steps == 0

    def test_divergence_carries_client_id(self):
        client = make_client("unstable", 12, 14)
        model = small_model(4)
        model.params[0] = np.nan  # poisoned state -> non-finite loss
        config = FederationConfig(
            rounds=1, local_epochs=1, batch_size=4, optimizer="sgd", regime="none"
        )
        with pytest.raises(RoundFailureError) as err:
            local_train(client, model, config)
        assert err.value.client_id == "unstable"

    def test_divergence_propagates_with_round_index(self):
        client = make_client("unstable", 12, 14)
        model = small_model(4)
        model.params[0] = np.nan
        config = FederationConfig(rounds=2, local_epochs=1, batch_size=4, regime="none")
        with pytest.raises(RoundFailureError) as err:
            run_federated([client], config, model, seed=1)
        assert err.value.round_index == 0


class TestAggregate:
    def test_identical_updates(self):
        model = small_model(5)
        out = aggregate([(model.copy(), 10), (model.copy(), 20)])
        np.testing.assert_allclose(out.params, model.params, rtol=1e-12)

    def test_symmetric_updates_cancel(self):
        model = small_model(6)
        neg = HazardNetwork(model.layer_dims, -model.params)
        out = aggregate([(model, 5), (neg, 5)])
        np.testing.assert_allclose(out.params, 0.0, atol=1e-15)

    def test_hand_weighted_average(self):
        dims = (1, 1)
        models = [HazardNetwork(dims, np.full(2, v)) for v in (1.0, 2.0, 3.0)]
        out = aggregate(list(zip(models, (1, 2, 3))))
        np.testing.assert_allclose(out.params, 14.0 / 6.0, rtol=1e-14)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            aggregate(
                [
                    (HazardNetwork((1, 1), np.zeros(2)), 1),
                    (HazardNetwork((2, 1), np.zeros(3)), 1),
                ]
            )

    def test_aggregation_never_touches_ledgers(self):
        client = make_client("d", 150, 15)
        model = small_model(7)
        config = FederationConfig(
            rounds=1, local_epochs=1, batch_size=32, regime="classical"
        )
        result = run_federated(
            [client], config, model, dp=DpConfig(noise_multiplier=1.0), seed=1
        )
        costs_after_rounds = client.ledger.costs.copy()
        aggregate([(result.model, client.n_records)] * 3)
        np.testing.assert_array_equal(client.ledger.costs, costs_after_rounds)


class TestRunFederated:
    def test_single_client_reduces_to_local_train(self):
        client_a = make_client("solo", 20, 16)
        client_b = make_client("solo", 20, 16)
        model = small_model(8)
        config = FederationConfig(rounds=1, local_epochs=2, batch_size=5, regime="none")
        result = run_federated([client_a], config, model, seed=3)
        direct, _, _ = local_train(client_b, model, config, round_index=0, base_seed=3)
        np.testing.assert_allclose(result.model.params, direct.params, rtol=1e-12)

    def test_identical_clients_full_batch_equals_centralized(self):
        # every client holds the same records: one federated round with full
        # batches is the centralized full-batch epoch on the shared data
        base = make_client("x", 18, 17)
        clients = [
            ClientState(f"c{i}", base.x.copy(), base.survived.copy(), base.failed.copy())
            for i in range(3)
        ]
        model = small_model(9)
        config = FederationConfig(
            rounds=1, local_epochs=1, batch_size=18,
            learning_rate=0.05, optimizer="sgd", regime="none",
        )
        fed = run_federated(clients, config, model, seed=4)
        cen = run_centralized(
            base.x, base.survived, base.failed, config, model, seed=4
        )
        np.testing.assert_allclose(fed.model.params, cen.model.params, rtol=1e-12)

    def test_round_split_gives_identical_classical_ledger(self):
        model = small_model(10)
        dp = DpConfig(noise_multiplier=1.3)
        two_rounds = make_client("e", 64, 18)
        config2 = FederationConfig(
            rounds=2, local_epochs=2, batch_size=16, regime="classical"
        )
        run_federated([two_rounds], config2, model, dp=dp, seed=5)

        one_round = make_client("e", 64, 18)
        config1 = FederationConfig(
            rounds=1, local_epochs=4, batch_size=16, regime="classical"
        )
        run_federated([one_round], config1, model, dp=dp, seed=5)

        np.testing.assert_array_equal(two_rounds.ledger.costs, one_round.ledger.costs)
        assert two_rounds.ledger.steps == one_round.ledger.steps

    def test_weights_sum_to_one(self):
        clients = [make_client(f"w{i}", 20 + 7 * i, 19 + i) for i in range(4)]
        config = FederationConfig(rounds=2, local_epochs=1, batch_size=8, regime="none")
        result = run_federated(clients, config, small_model(11), seed=6)
        for report in result.rounds:
            assert sum(report.weights.values()) == pytest.approx(1.0, abs=1e-12)

    def test_epsilon_nondecreasing_across_rounds(self):
        clients = [make_client(f"p{i}", 120, 30 + i) for i in range(2)]
        config = FederationConfig(
            rounds=3, local_epochs=1, batch_size=32, regime="classical"
        )
        result = run_federated(
            clients, config, small_model(12), dp=DpConfig(noise_multiplier=1.0), seed=7
        )
        for cid in ("p0", "p1"):
            eps = [r.epsilon[cid] for r in result.rounds if cid in r.epsilon]
            assert all(a <= b + 1e-12 for a, b in zip(eps, eps[1:]))
            lin = [r.epsilon_linear[cid] for r in result.rounds if cid in r.epsilon_linear]
            assert all(a <= b + 1e-12 for a, b in zip(lin, lin[1:]))
            # linear mode composes order-by-order conversions, never tighter
            assert result.spends[cid].epsilon <= result.spends[cid].epsilon_linear

    def test_non_participants_spend_nothing(self):
        clients = [make_client(f"n{i}", 150, 40 + i) for i in range(5)]
        config = FederationConfig(
            rounds=3, local_epochs=1, batch_size=32, participation=0.2,
            regime="classical",
        )
        result = run_federated(
            clients, config, small_model(13), dp=DpConfig(noise_multiplier=1.0), seed=8
        )
        participated = set()
        for report in result.rounds:
            participated.update(report.participants)
        for client in clients:
            if client.client_id not in participated:
                assert client.ledger.steps == 0
                assert result.spends[client.client_id].epsilon_linear == 0.0

    def test_bayesian_fallback_below_hundred_records(self):
        small = make_client("tiny", 60, 50)
        big = make_client("big", 400, 51)
        config = FederationConfig(
            rounds=1, local_epochs=1, batch_size=16, regime="bayesian"
        )
        result = run_federated(
            [small, big], config, small_model(14),
            dp=DpConfig(noise_multiplier=1.0), bdp=BdpConfig(), seed=9,
        )
        assert isinstance(small.ledger, RdpLedger)
        assert isinstance(big.ledger, BdpLedger)
        assert result.spends["tiny"].fallback
        assert not result.spends["big"].fallback
        assert big.ledger.worst_case_delta == pytest.approx((2.0 / 16) ** 2)
        assert big.ledger.max_delta <= big.ledger.worst_case_delta + 1e-12

    def test_deterministic_under_seed(self):
        def run_once():
            clients = [make_client(f"s{i}", 80, 60 + i) for i in range(3)]
            config = FederationConfig(
                rounds=2, local_epochs=1, batch_size=16, regime="classical"
            )
            return run_federated(
                clients, config, small_model(15),
                dp=DpConfig(noise_multiplier=1.0), seed=10,
            )

        a, b = run_once(), run_once()
        assert [r.checksum for r in a.rounds] == [r.checksum for r in b.rounds]
        np.testing.assert_array_equal(a.model.params, b.model.params)

    def test_centralized_is_single_client_federation(self):
        client = make_client("pool", 50, 70)
        config = FederationConfig(rounds=2, local_epochs=1, batch_size=10, regime="none")
        model = small_model(16)
        fed = run_federated(
            [ClientState("pooled", client.x, client.survived, client.failed)],
            config, model, seed=11,
        )
        cen = run_centralized(
            client.x, client.survived, client.failed, config, model, seed=11
        )
        np.testing.assert_array_equal(fed.model.params, cen.model.params)


class TestFederationConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            FederationConfig(rounds=0)
        with pytest.raises(ValueError):
            FederationConfig(participation=0.0)
        with pytest.raises(ValueError):
            FederationConfig(regime="mystery")
        with pytest.raises(ValueError):
            FederationConfig(optimizer="lion")
