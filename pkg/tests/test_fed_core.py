from dataclasses import replace

import numpy as np
import pytest

from fedshift import fed_core as fc
from fedshift import predictors as P
from fedshift import ratio_estimation as R
from fedshift import synthdata as sd


def small_scenario(train, test, seed=0, dim=4, separation=3.0):
    train = np.asarray(train)
    gen = sd.GaussianClusters(train.shape[1], dim, separation=separation)
    return sd.ShiftScenario(train, test, gen, seed)


SHIFTED = small_scenario([[60, 20, 10, 10], [10, 10, 20, 60], [25, 25, 25, 25]], [[10, 10, 20, 60], [60, 20, 10, 10], [10, 40, 40, 10]])
NO_SHIFT = small_scenario([[40, 20, 20, 20]] * 3, [[20, 10, 10, 10]] * 3)


def logistic(scenario, seed=0):
    return P.make_predictor("logistic", scenario.generator.dim, scenario.num_classes, seed=seed)


class ConstantRatios:
    def __init__(self, c):
        self.c = c

    def combined(self, split, pooled_test, num_clients):
        return np.full(split.n_train, self.c)

    local = focused = None


class RecordingSource:
    """Oracle ratios that log every array each call receives."""

    def __init__(self, oracle):
        self.inner = fc.OracleRatios(oracle)
        self.calls = []

    def combined(self, split, pooled_test, num_clients):
        self.calls.append(("combined", split.client_id, [split.train_x, split.test_pool, pooled_test]))
        return self.inner.combined(split, pooled_test, num_clients)

    def local(self, split):
        self.calls.append(("local", split.client_id, [split.train_x, split.test_pool]))
        return self.inner.local(split)

    def focused(self, split, target_pool, target):
        self.calls.append(("focused", split.client_id, [split.train_x, target_pool]))
        return self.inner.focused(split, target_pool, target)


def cross_client_flows(calls, splits):
    """Number of (call, foreign client) pairs where the call saw a row owned by that other client."""
    owners = {}
    for s in splits:
        for row in np.concatenate([s.train_x, s.test_pool, s.eval_x]):
            owners[row.tobytes()] = s.client_id
    flows = 0
    for _, cid, arrays in calls:
        foreign = {owners[r.tobytes()] for a in arrays for r in a} - {cid}
        flows += len(foreign)
    return flows


class TestBroadcast:
    def test_multiset_union(self):
        sc = small_scenario([[5, 5]] * 3, [[2, 3]] * 3)
        clients = fc.make_clients(sc.build())
        pool = fc.broadcast_shuffled_pool(clients, seed=4)
        assert len(pool) == 15
        union = np.concatenate([c.split.test_pool for c in clients])
        np.testing.assert_array_equal(np.sort(pool, axis=0), np.sort(union, axis=0))
        for seed in (0, 1, 99):
            np.testing.assert_array_equal(
                np.sort(fc.broadcast_shuffled_pool(clients, seed), axis=0), np.sort(pool, axis=0)
            )

    def test_same_seed_same_order(self):
        clients = fc.make_clients(SHIFTED.build())
        np.testing.assert_array_equal(fc.broadcast_shuffled_pool(clients, 3), fc.broadcast_shuffled_pool(clients, 3))

    def test_not_identity(self):
        clients = fc.make_clients(small_scenario([[5, 5]] * 3, [[2, 3]] * 3).build())
        union = np.concatenate([c.split.test_pool for c in clients])
        identical = sum(np.array_equal(fc.broadcast_shuffled_pool(clients, s), union) for s in range(100))
        assert identical == 0

    def test_unequal_contributions(self):
        clients = fc.make_clients(SHIFTED.build())
        clients[1].split = replace(clients[1].split, test_pool=clients[1].split.test_pool[:-1])
        with pytest.raises(fc.ProtocolError):
            fc.broadcast_shuffled_pool(clients, 0)


class TestAssignRatios:
    def test_fedavg_unit(self):
        clients = fc.assign_ratios(fc.make_clients(SHIFTED.build()), "FEDAVG")
        assert all(np.all(c.weights == 1.0) for c in clients)

    def test_ftw_identical_distributions_gives_k(self):
        splits = NO_SHIFT.build()
        clients = fc.make_clients(splits)
        pool = fc.broadcast_shuffled_pool(clients, 0)
        fc.assign_ratios(clients, "FTW", fc.OracleRatios(NO_SHIFT.oracle()), pool)
        for c in clients:
            np.testing.assert_allclose(c.weights, 3.0)

    def test_missing_prefit_model(self):
        clients = fc.make_clients(SHIFTED.build())
        pool = fc.broadcast_shuffled_pool(clients, 0)
        model = R.make_ratio_model("linear-softplus", 4, 10.0)
        with pytest.raises(fc.ConfigurationError, match="client 1"):
            fc.assign_ratios(clients, "FTW", fc.PrefitRatios({0: model}), pool)

    def test_non_fedavg_needs_source(self):
        with pytest.raises(fc.ConfigurationError):
            fc.assign_ratios(fc.make_clients(SHIFTED.build()), "FITW")

    def test_focused_needs_weights(self):
        with pytest.raises(fc.ConfigurationError):
            fc.assign_ratios(fc.make_clients(SHIFTED.build()), "FOCUSED", fc.OracleRatios(SHIFTED.oracle()))

    def test_prefit_weights_clipped(self):
        model = R.make_ratio_model("linear-softplus", 4, 100.0).with_params([0, 0, 0, 0, 50.0])
        model.meta["r_tilde"] = 3.0
        clients = fc.make_clients(SHIFTED.build())
        fc.assign_ratios(clients, "FITW", fc.PrefitRatios({k: model for k in range(3)}))
        assert all(np.all(c.weights == 6.0) for c in clients)

    def test_fitw_has_no_cross_client_flows(self, monkeypatch):
        splits = SHIFTED.build()
        src = RecordingSource(SHIFTED.oracle())

        def forbidden(*a, **k):
            raise AssertionError("FITW must not broadcast the pool")

        monkeypatch.setattr(fc, "broadcast_shuffled_pool", forbidden)
        fc.run_training(splits, "FITW", logistic(SHIFTED), fc.TrainHyper(rounds=3), ratio_source=src)
        assert {c[0] for c in src.calls} == {"local"}
        assert cross_client_flows(src.calls, splits) == 0

    def test_instrument_detects_ftw_flows(self):
        splits = SHIFTED.build()
        src = RecordingSource(SHIFTED.oracle())
        fc.run_training(splits, "FTW", logistic(SHIFTED), fc.TrainHyper(rounds=1), ratio_source=src)
        assert cross_client_flows(src.calls, splits) > 0


def _server(pred, lr=0.1, **kw):
    return fc.ServerState(params=pred.params.copy(), lr=lr, **kw)


class TestRunRound:
    def test_single_client_plain_sgd(self):
        rng = sd.stream(0, 1)
        x, y = rng.standard_normal((8, 2)), rng.standard_normal(8)
        split = sd.DatasetSplit(0, x, y, x, x, y)
        client = fc.ClientState(0, split, np.ones(8))
        pred = P.make_predictor("linear", 2, seed=0)
        new, log = fc.run_round(_server(pred), pred, [client], seed=0, batch_size=None)
        expected = pred.params - 0.1 * P.weighted_grad(pred, P.WeightedBatch(x, y, np.ones(8)))
        np.testing.assert_array_equal(new.params, expected)
        assert log.participants == [0] and new.round == 1

    def test_identical_clients_sum(self):
        rng = sd.stream(0, 2)
        x, y = rng.standard_normal((8, 2)), rng.standard_normal(8)
        clients = [fc.ClientState(k, sd.DatasetSplit(k, x, y, x, x, y), np.ones(8)) for k in range(4)]
        pred = P.make_predictor("linear", 2, seed=0)
        g = P.weighted_grad(pred, P.WeightedBatch(x, y, np.ones(8)))
        new, _ = fc.run_round(_server(pred), pred, clients, seed=0, batch_size=None)
        np.testing.assert_allclose(new.params, pred.params - 0.1 * 4 * g, rtol=1e-14)

    def test_partial_participation_reproducible(self):
        a = [fc.sample_participants(100, 0.05, seed=7, round_=t) for t in range(20)]
        b = [fc.sample_participants(100, 0.05, seed=7, round_=t) for t in range(20)]
        assert a == b and all(len(p) == 5 and p == sorted(set(p)) for p in a)
        assert len({tuple(p) for p in a}) > 1

    def test_non_finite_gradient_error_carries_id(self, monkeypatch):
        clients = fc.assign_ratios(fc.make_clients(SHIFTED.build()), "FEDAVG")
        pred = logistic(SHIFTED)
        real, calls = fc.weighted_grad, []

        def poisoned(model, batch, loss_kind=None):
            calls.append(1)
            g = real(model, batch, loss_kind)
            return g * np.nan if len(calls) == 2 else g

        monkeypatch.setattr(fc, "weighted_grad", poisoned)
        with pytest.raises(fc.NonFiniteGradientError) as exc:
            fc.run_round(_server(pred), pred, clients, seed=0)
        assert exc.value.client_id == 1

    def test_sum_aggregation_split_invariance(self):
        splits = SHIFTED.build()
        base = fc.make_clients(splits)
        fc.assign_ratios(base, "FTW", fc.OracleRatios(SHIFTED.oracle()), fc.broadcast_shuffled_pool(base, 0))
        pred = logistic(SHIFTED)
        whole, _ = fc.run_round(_server(pred), pred, base, seed=0, batch_size=None)
        halves = [fc.ClientState(k, replace(base[0].split, client_id=k), base[0].weights / 2) for k in (0, 1)]
        halves += [fc.ClientState(k + 1, replace(c.split, client_id=k + 1), c.weights) for k, c in enumerate(base[1:], 1)]
        split_run, _ = fc.run_round(_server(pred), pred, halves, seed=0, batch_size=None)
        np.testing.assert_array_equal(whole.params, split_run.params)


class TestRunTraining:
    def test_fedavg_converges_on_separable_two_class(self):
        sc = small_scenario([[100, 100]] * 3, [[50, 50]] * 3, dim=2, separation=6.0)
        res = fc.run_training(sc.build(), "FEDAVG", logistic(sc), fc.TrainHyper(rounds=300))
        assert res.summary()["average_accuracy"] >= 0.95

    def test_fitw_bit_identical_to_fedavg_without_shift(self):
        splits = NO_SHIFT.build()
        hyper = fc.TrainHyper(rounds=50, batch_size=16, participation=0.67, eval_every=10)
        a = fc.run_training(splits, "FITW", logistic(NO_SHIFT), hyper, seed=3, ratio_source=fc.OracleRatios(NO_SHIFT.oracle()))
        b = fc.run_training(splits, "FEDAVG", logistic(NO_SHIFT), hyper, seed=3)
        assert all(np.all(c.weights == 1.0) for c in a.clients)
        np.testing.assert_array_equal(a.predictor.params, b.predictor.params)
        assert [e.loss for e in a.log] == [e.loss for e in b.log]

    @pytest.mark.parametrize("mode", ["FTW", "FITW", "FEDAVG"])
    def test_threads_do_not_change_results(self, mode):
        splits = SHIFTED.build()
        hyper = fc.TrainHyper(rounds=40, batch_size=8, participation=0.67, eval_every=10)
        src = fc.OracleRatios(SHIFTED.oracle())
        runs = [fc.run_training(splits, mode, logistic(SHIFTED), hyper, seed=5, ratio_source=src, threads=t) for t in (1, 4)]
        np.testing.assert_array_equal(runs[0].predictor.params, runs[1].predictor.params)
        assert [e.loss for e in runs[0].log] == [e.loss for e in runs[1].log]
        assert runs[0].client_accuracy == runs[1].client_accuracy

    def test_constant_ratio_equivalence(self):
        splits = SHIFTED.build()
        hyper = fc.TrainHyper(rounds=30, lr=0.05, batch_size=8)
        fedavg = fc.run_training(splits, "FEDAVG", logistic(SHIFTED), hyper, seed=2)
        scaled = fc.run_training(splits, "FTW", logistic(SHIFTED), replace(hyper, lr=0.05 / 4), seed=2, ratio_source=ConstantRatios(4.0))
        np.testing.assert_array_equal(fedavg.predictor.params, scaled.predictor.params)

    def test_mlp_runs_with_defaults(self):
        pred = P.make_predictor("mlp", 4, 4, hidden=8)
        res = fc.run_training(SHIFTED.build(), "FEDAVG", pred, fc.TrainHyper(rounds=5))
        assert fc.TrainHyper().step_size(pred) == 0.01 and len(res.log) == 5

    @pytest.mark.parametrize(
        "options",
        [dict(server_optimizer="adam", lr=0.01), dict(schedule="inv_sqrt"), dict(aggregation="mean"), dict(participation=0.34)],
    )
    def test_options_run(self, options):
        hyper = fc.TrainHyper(rounds=20, eval_every=5, **options)
        res = fc.run_training(SHIFTED.build(), "FTW", logistic(SHIFTED), hyper, ratio_source=fc.OracleRatios(SHIFTED.oracle()))
        assert np.all(np.isfinite(res.predictor.params))

    def test_focused_on_target_client_helps_it(self):
        train, test = sd.fashion_mnist_five_client_counts()
        sc = sd.ShiftScenario(np.rint(train * 0.2).astype(int), np.rint(test * 0.2).astype(int), sd.GaussianClusters(10, 10, 2.5), 0)
        splits = sc.build()
        pred = P.make_predictor("logistic", 10, 10, seed=0)
        hyper = fc.TrainHyper(rounds=600, lr=0.01)
        target = 2
        focus = fc.FocusSpec(target, tuple(1.0 if k == target else 0.0 for k in range(5)))
        foc = fc.run_training(splits, "FOCUSED", pred, hyper, ratio_source=fc.OracleRatios(sc.oracle()), focus=focus)
        avg = fc.run_training(splits, "FEDAVG", pred, hyper)
        assert foc.client_accuracy[target] > avg.client_accuracy[target]

    def test_round_log_csv(self, tmp_path):
        res = fc.run_training(SHIFTED.build(), "FEDAVG", logistic(SHIFTED), fc.TrainHyper(rounds=4, eval_every=2))
        fc.write_round_log(res, tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "round,mode,avg_loss,avg_acc,acc_client_0,acc_client_1,acc_client_2"
        assert len(lines) == 5 and lines[1].split(",")[3] == "" and lines[2].split(",")[3] != ""


class TestConsistency:
    def test_ftw_decreasing_and_fedavg_plateaus(self):
        fam = sd.default_consistency_family()
        seeds = range(5)
        ftw = fc.consistency_sweep(fam, "FTW", [10, 100, 1000, 10_000], seeds)
        fedavg = fc.consistency_sweep(fam, "FEDAVG", [100, 1000, 10_000], seeds)
        med = [r.median_excess for r in ftw]
        assert fc.strictly_decreasing(med[1:])
        assert med[0] > med[-1]
        assert fedavg[-1].median_excess > 10 * med[-1]
        assert fedavg[-1].median_excess > 0.5 * fedavg[0].median_excess

    def test_single_row(self):
        rows = fc.consistency_sweep(sd.default_consistency_family(), "FTW", [50], [0])
        assert len(rows) == 1 and rows[0].std_excess == 0.0

    def test_true_minimizer_has_zero_excess_at_population(self):
        fam = sd.default_consistency_family()
        theta, A = fc.true_risk_minimizer(fam)
        # gradient of the population risk vanishes at theta
        phi = np.hstack([fam.support, np.ones((len(fam.support), 1))])
        q = fam.test_probs.mean(axis=0)
        np.testing.assert_allclose(phi.T @ (q * (phi @ theta - fam.target)), 0.0, atol=1e-12)
