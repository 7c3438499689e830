"""Surrogate network: forward math, cost/regularizers, training loop, and the
versioned JSON round trip."""

import math

import numpy as np
import pytest

from mzimodel import DataError, Hyperparams, SchemaError, SurrogateNet, rmse_db
from mzimodel import mesh, network


def toy_net(n1=2, n2=2, scale=0.3, seed=0, freeze=None):
    rng = np.random.default_rng(seed)
    theta = scale * rng.standard_normal(network.n_params(n1, n2))
    if freeze is None:
        freeze = np.zeros(theta.size, dtype=bool)
    return SurrogateNet(n1=n1, n2=n2, theta=theta, freeze_mask=freeze)


class TestStructure:
    def test_parameter_count(self):
        assert network.n_params(83, 131) == 9 * 83 + 83 + 83 * 131 + 131 + 131 * 9 + 9
        net = network.init_params(Hyperparams(83, 131))
        assert net.n_theta == network.n_params(83, 131)

    def test_layout_tiles_theta_exactly(self):
        net = toy_net(5, 4)
        edges = [e for pair in net.layout() for e in pair]
        assert edges[0] == 0 and edges[-1] == net.n_theta
        for i in range(0, len(edges) - 2, 2):
            assert edges[i + 1] == edges[i + 2]

    def test_layer_slices_cover_three_layers(self):
        net = toy_net(5, 4)
        ls = network.layer_slices(net)
        assert len(ls) == 3
        assert ls[0][0] == (0, 45) and ls[0][1] == (45, 50)

    def test_theta_length_enforced(self):
        with pytest.raises(DataError, match="theta"):
            SurrogateNet(n1=2, n2=2, theta=np.zeros(10),
                         freeze_mask=np.zeros(10, dtype=bool))

    def test_nonfinite_theta_rejected(self):
        theta = np.zeros(network.n_params(2, 2))
        theta[5] = np.inf
        with pytest.raises(DataError, match="non-finite"):
            SurrogateNet(n1=2, n2=2, theta=theta,
                         freeze_mask=np.zeros(theta.size, dtype=bool))

    def test_hyperparams_validation(self):
        with pytest.raises(DataError):
            Hyperparams(0, 5)
        with pytest.raises(DataError):
            Hyperparams(5, 5, lambda_l1=-1e-3)


class TestForward:
    def test_zero_network_outputs_zero(self, rng):
        n = toy_net(scale=0.0)
        V = rng.uniform(0, 2, (4, 9))
        assert np.all(network.forward_batch(n, V) == 0.0)

    def test_all_zero_weights_output_the_bias(self, rng):
        n = toy_net(scale=0.0)
        theta = n.theta.copy()
        theta[-9:] = np.arange(9.0)
        n = n.with_theta(theta)
        out = network.forward_batch(n, rng.uniform(0, 2, (3, 9)))
        assert np.array_equal(out, np.tile(np.arange(9.0), (3, 1)))

    def test_hand_computed_two_unit_network(self):
        # explicit scalar arithmetic, independent of the vectorized kernels
        W1 = np.column_stack([np.full(9, 0.1), np.full(9, -0.05)])
        b1 = np.array([0.2, -0.1])
        W2 = np.array([[0.3, -0.2], [0.1, 0.4]])
        b2 = np.array([0.05, -0.15])
        W3 = np.vstack([np.full(9, 1.5), np.full(9, -2.0)])
        b3 = 0.1 * np.arange(9.0)
        theta = np.concatenate([W1.ravel(), b1, W2.ravel(), b2, W3.ravel(), b3])
        net = SurrogateNet(n1=2, n2=2, theta=theta,
                           freeze_mask=np.zeros(theta.size, dtype=bool))

        v = np.full(9, 1.5)          # normalizes to x = 0.5
        h10 = math.tanh(9 * 0.5 * 0.1 + 0.2)
        h11 = math.tanh(9 * 0.5 * -0.05 - 0.1)
        h20 = math.tanh(h10 * 0.3 + h11 * 0.1 + 0.05)
        h21 = math.tanh(h10 * -0.2 + h11 * 0.4 - 0.15)
        want = np.array([h20 * 1.5 + h21 * -2.0 + 0.1 * j for j in range(9)])
        got = network.forward(net, v)
        assert np.allclose(got.ravel(), want, rtol=0, atol=1e-14)

    def test_single_input_reshapes_to_matrix(self):
        out = network.forward(toy_net(), np.linspace(0, 2, 9))
        assert out.shape == (3, 3)

    def test_input_shape_enforced(self, rng):
        with pytest.raises(DataError, match="voltages"):
            network.forward_batch(toy_net(), rng.uniform(0, 2, (4, 8)))

    def test_normalization_uses_v_max(self):
        # doubling v_max and the voltages together leaves outputs unchanged
        a = toy_net()
        b = SurrogateNet(n1=a.n1, n2=a.n2, theta=a.theta,
                         freeze_mask=a.freeze_mask, v_max=2 * a.v_max)
        V = np.random.default_rng(3).uniform(0, 2, (6, 9))
        assert np.allclose(network.forward_batch(a, V),
                           network.forward_batch(b, 2 * V), atol=1e-14)


class TestCost:
    def test_exact_predictor_costs_nothing(self, rng):
        net = toy_net(6, 5)
        V = rng.uniform(0, 2, (30, 9))
        T = network.forward_batch(net, V)
        value, g = network.cost(net, V, T)
        assert value < 1e-12
        assert np.all(np.isfinite(g))

    def test_constant_three_db_residual(self, rng):
        net = toy_net(6, 5)
        V = rng.uniform(0, 2, (30, 9))
        T = network.forward_batch(net, V) - 3.0
        value, _ = network.cost(net, V, T)
        assert value == pytest.approx(3.0, rel=1e-12)

    def test_regularizers_add_their_exact_penalty(self, rng):
        net = toy_net(6, 5)
        V = rng.uniform(0, 2, (30, 9))
        T = network.forward_batch(net, V)
        value, _ = network.cost(net, V, T, lambda_l1=0.01, lambda_l2=0.001)
        th = net.theta
        want = 0.01 * np.sum(np.abs(th)) + 0.001 * float(th @ th)
        assert value == pytest.approx(want, rel=1e-12)

    def test_frozen_gradient_entries_are_zero(self, rng):
        freeze = np.zeros(network.n_params(4, 3), dtype=bool)
        freeze[::3] = True
        net = toy_net(4, 3, freeze=freeze)
        V = rng.uniform(0, 2, (10, 9))
        _, g = network.cost(net, V, rng.uniform(-30, -1, (10, 9)))
        assert np.all(g[freeze] == 0.0)
        assert np.any(g[~freeze] != 0.0)

    def test_rejects_bad_inputs(self, rng):
        net = toy_net()
        with pytest.raises(DataError, match="empty"):
            network.cost(net, np.zeros((0, 9)), np.zeros((0, 9)))
        T = rng.uniform(-30, -1, (5, 9))
        T[0, 0] = np.nan
        with pytest.raises(DataError, match="non-finite"):
            network.cost(net, rng.uniform(0, 2, (5, 9)), T)
        with pytest.raises(DataError, match="targets"):
            network.cost(net, rng.uniform(0, 2, (5, 9)), np.zeros((4, 9)))


class TestInit:
    def test_deterministic_and_seed_sensitive(self):
        hp = Hyperparams(12, 7)
        assert np.array_equal(network.init_params(hp, seed=5).theta,
                              network.init_params(hp, seed=5).theta)
        assert not np.array_equal(network.init_params(hp, seed=5).theta,
                                  network.init_params(hp, seed=6).theta)

    def test_layer_scale_and_zero_biases(self):
        net = network.init_params(Hyperparams(400, 50), seed=0)
        (w1, b1), (w2, b2), (w3, b3) = network.layer_slices(net)
        th = net.theta
        for (ws, we), fan_in in ((w1, 9), (w2, 400), (w3, 50)):
            block = th[ws:we]
            bound = 1.0 / math.sqrt(fan_in)
            assert np.max(np.abs(block)) <= bound
            want_sd = bound / math.sqrt(3.0)  # uniform on [-bound, bound]
            assert abs(block.std() - want_sd) < 0.05 * want_sd
        for bs, be in (b1, b2, b3):
            assert np.all(th[bs:be] == 0.0)

    def test_nothing_frozen_initially(self):
        assert not network.init_params(Hyperparams(5, 5)).freeze_mask.any()


class TestTrain:
    def test_student_reproduces_a_realizable_teacher(self, rng):
        teacher = toy_net(8, 6, scale=0.5, seed=10)
        V = rng.uniform(0, 2, (400, 9))
        T = network.forward_batch(teacher, V)
        Vv = rng.uniform(0, 2, (80, 9))
        Tv = network.forward_batch(teacher, Vv)
        student = network.init_params(Hyperparams(32, 24), seed=1)
        student, hist = network.train(student, V, T, Vv, Tv, max_iter=400)
        assert rmse_db(network.forward_batch(student, V), T) < 0.05
        assert hist.best_validation_rmse < 0.05

    def test_validation_selection_never_worse_than_final(self, rng):
        teacher = toy_net(8, 6, scale=0.5, seed=10)
        V = rng.uniform(0, 2, (100, 9))
        T = network.forward_batch(teacher, V) + rng.normal(0, 0.5, (100, 9))
        Vv = rng.uniform(0, 2, (50, 9))
        Tv = network.forward_batch(teacher, Vv)
        net0 = network.init_params(Hyperparams(16, 12), seed=2)
        net, hist = network.train(net0, V, T, Vv, Tv, max_iter=150)
        vals = hist.rows[1:, 2]
        assert hist.best_validation_rmse == pytest.approx(np.nanmin(vals), abs=1e-12)
        assert rmse_db(network.forward_batch(net, Vv), Tv) == pytest.approx(
            hist.best_validation_rmse, abs=1e-12)

    def test_without_validation_keeps_final_iterate(self, rng):
        V = rng.uniform(0, 2, (60, 9))
        T = rng.uniform(-30, -1, (60, 9))
        net, hist = network.train(network.init_params(Hyperparams(6, 5), seed=0),
                                  V, T, max_iter=30)
        assert math.isnan(hist.best_validation_rmse)
        assert np.all(np.isnan(hist.rows[:, 2]))

    def test_fully_frozen_net_never_moves(self, rng):
        base = network.init_params(Hyperparams(6, 5), seed=3)
        frozen = SurrogateNet(n1=6, n2=5, theta=base.theta,
                              freeze_mask=np.ones(base.n_theta, dtype=bool))
        V = rng.uniform(0, 2, (50, 9))
        T = rng.uniform(-30, -1, (50, 9))
        net, _ = network.train(frozen, V, T, max_iter=50)
        assert np.array_equal(net.theta, base.theta)

    def test_partial_freeze_is_bit_exact(self, rng):
        base = network.init_params(Hyperparams(6, 5), seed=3)
        mask = np.zeros(base.n_theta, dtype=bool)
        (w1, b1), _, _ = network.layer_slices(base)
        mask[w1[0]:w1[1]] = True
        mask[b1[0]:b1[1]] = True
        net0 = SurrogateNet(n1=6, n2=5, theta=base.theta, freeze_mask=mask)
        V = rng.uniform(0, 2, (50, 9))
        T = rng.uniform(-30, -1, (50, 9))
        net, _ = network.train(net0, V, T, max_iter=50)
        assert np.array_equal(net.theta[mask], base.theta[mask])
        assert not np.array_equal(net.theta[~mask], base.theta[~mask])

    def test_history_csv(self, rng, tmp_path):
        V = rng.uniform(0, 2, (30, 9))
        T = rng.uniform(-30, -1, (30, 9))
        _, hist = network.train(network.init_params(Hyperparams(4, 4)), V, T,
                                max_iter=20)
        path = tmp_path / "history.csv"
        hist.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "iteration,train_cost,validation_rmse"
        assert len(lines) == hist.rows.shape[0] + 1


class TestSerialization:
    def test_round_trip_is_bit_exact(self, tmp_path):
        mask = np.zeros(network.n_params(5, 4), dtype=bool)
        mask[7:19] = True
        net = toy_net(5, 4, seed=8, freeze=mask)
        path = tmp_path / "net.json"
        network.save_net(net, path)
        back = network.load_net(path)
        assert np.array_equal(back.theta, net.theta)
        assert np.array_equal(back.freeze_mask, net.freeze_mask)
        assert (back.n1, back.n2, back.v_max) == (net.n1, net.n2, net.v_max)

    def test_rejects_foreign_document(self):
        with pytest.raises(SchemaError, match="network"):
            network.deserialize({"format": "else"})

    def test_rejects_bad_version(self):
        doc = network.serialize(toy_net())
        doc["version"] = 2
        with pytest.raises(SchemaError, match="version"):
            network.deserialize(doc)

    def test_missing_freeze_mask_is_called_out(self):
        doc = network.serialize(toy_net())
        del doc["freeze_mask"]
        with pytest.raises(SchemaError, match="freeze_mask"):
            network.deserialize(doc)

    def test_corrupted_theta_rejected(self):
        doc = network.serialize(toy_net())
        doc["theta"] = doc["theta"][:-1]
        with pytest.raises(SchemaError):
            network.deserialize(doc)
