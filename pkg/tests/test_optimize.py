"""Minimizer behavior on textbook objectives, gradient verification, and the
analytical-model fit built on top of them."""

import math

import numpy as np
import pytest

from mzimodel import (
    AnalyticalModelParams,
    Dataset,
    Hyperparams,
    Objective,
    TrainingError,
    acquire,
    check_gradient,
    default_chip,
    default_topology,
    fit_am,
    minimize,
    rmse_db,
    split,
)
from mzimodel import mesh, network
from mzimodel.data import PROV_EXPERIMENTAL, SPLIT_TEST
from mzimodel.optimize import (
    am_objective,
    default_am_init,
    eval_weights,
    pack_am,
    trace_to_csv,
    unpack_am,
)


def quadratic(c, scale=None):
    c = np.asarray(c, dtype=float)
    d = np.ones_like(c) if scale is None else np.asarray(scale, dtype=float)

    def fun_grad(x):
        r = x - c
        return float(r @ (d * r)), 2.0 * d * r

    return Objective(fun_grad=fun_grad, dim=c.size, max_iter=200, gtol=1e-10,
                     ftol=0.0)


def rosenbrock():
    def fun_grad(x):
        a, b = x
        f = (1.0 - a) ** 2 + 100.0 * (b - a * a) ** 2
        g = np.array([-2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                      200.0 * (b - a * a)])
        return f, g

    return Objective(fun_grad=fun_grad, dim=2, max_iter=400, gtol=1e-10,
                     ftol=0.0)


class TestMinimize:
    def test_quadratic_converges_within_two_p_iterations(self, rng):
        c = rng.normal(0, 3, 12)
        res = minimize(quadratic(c), rng.normal(0, 3, 12))
        assert res.converged
        assert res.n_iter <= 24
        assert res.fun <= 1e-8
        assert np.max(np.abs(res.x - c)) < 1e-5

    def test_ill_conditioned_quadratic(self, rng):
        scale = np.logspace(0, 3, 10)
        c = rng.normal(0, 1, 10)
        res = minimize(quadratic(c, scale), np.zeros(10))
        assert res.fun <= 1e-8

    def test_rosenbrock_from_standard_start(self):
        res = minimize(rosenbrock(), np.array([-1.2, 1.0]))
        assert res.fun < 1e-8
        assert np.max(np.abs(res.x - 1.0)) < 1e-4

    def test_zero_gradient_start_returns_immediately(self):
        c = np.arange(4.0)
        res = minimize(quadratic(c), c.copy())
        assert res.n_iter == 0
        assert res.converged and res.status == "gtol"
        assert res.trace.shape == (1, 4)

    def test_accepted_values_strictly_decrease(self):
        res = minimize(rosenbrock(), np.array([-1.2, 1.0]))
        vals = res.trace[:, 1]
        assert np.all(np.diff(vals) < 0.0)

    def test_deterministic(self, rng):
        x0 = rng.normal(0, 1, 2)
        a = minimize(rosenbrock(), x0)
        b = minimize(rosenbrock(), x0)
        assert np.array_equal(a.x, b.x)
        assert np.array_equal(a.trace, b.trace)

    def test_freeze_mask_pins_coordinates_bit_exactly(self, rng):
        c = rng.normal(0, 2, 6)
        x0 = rng.normal(0, 2, 6)
        mask = np.array([False, True, False, False, True, False])
        res = minimize(quadratic(c), x0, freeze_mask=mask)
        assert np.array_equal(res.x[mask], x0[mask])
        # the quadratic is separable, so the free block still reaches its optimum
        assert np.max(np.abs(res.x[~mask] - c[~mask])) < 1e-5

    def test_freeze_mask_shape_mismatch(self):
        with pytest.raises(TrainingError, match="freeze mask"):
            minimize(quadratic(np.zeros(3)), np.zeros(3),
                     freeze_mask=np.zeros(4, dtype=bool))

    def test_memory_must_be_positive(self):
        with pytest.raises(TrainingError, match="memory"):
            minimize(quadratic(np.zeros(2)), np.zeros(2), memory=0)

    def test_nonfinite_start_rejected(self):
        with pytest.raises(TrainingError, match="starting point"):
            minimize(quadratic(np.zeros(2)), np.array([np.nan, 0.0]))

    def test_nonfinite_objective_at_start_rejected(self):
        obj = Objective(fun_grad=lambda x: (math.nan, np.zeros(2)), dim=2)
        with pytest.raises(TrainingError, match="non-finite"):
            minimize(obj, np.zeros(2))

    def test_line_search_backs_off_from_inf_region(self):
        # minimum at 0.9 behind a wall at x=1; the first trial steps over the
        # wall, so the search must shrink back instead of aborting
        def fun_grad(x):
            if x[0] >= 1.0:
                return math.inf, np.array([math.inf])
            return (x[0] - 0.9) ** 2, np.array([2.0 * (x[0] - 0.9)])

        obj = Objective(fun_grad=fun_grad, dim=1, max_iter=100)
        res = minimize(obj, np.array([0.0]))
        assert res.converged
        assert abs(res.x[0] - 0.9) < 1e-5

    def test_callback_sees_every_accepted_iterate(self):
        seen = []
        minimize(rosenbrock(), np.array([-1.2, 1.0]),
                 callback=lambda it, x, f, gn: seen.append(it))
        assert seen == list(range(1, len(seen) + 1))

    def test_trace_csv_round_trip(self, tmp_path):
        res = minimize(quadratic(np.array([3.0, -2.0])), np.zeros(2))
        path = tmp_path / "trace.csv"
        trace_to_csv(res.trace, path)
        header = path.read_text().splitlines()[0]
        assert header == "iteration,objective,grad_norm,step"
        back = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        assert np.allclose(back, res.trace, rtol=0, atol=0)
        assert np.array_equal(back[:, 0], np.arange(back.shape[0]))


class TestCheckGradient:
    def test_quadratic_gradient_is_clean(self, rng):
        obj = quadratic(rng.normal(0, 1, 5))
        assert check_gradient(obj, rng.normal(0, 1, 5), step=1e-4) < 1e-10

    def test_directional_mode(self, rng):
        obj = quadratic(rng.normal(0, 1, 40))
        err = check_gradient(obj, rng.normal(0, 1, 40), step=1e-4,
                             directions=12)
        assert err < 1e-8

    def test_detects_a_wrong_gradient(self):
        obj = Objective(fun_grad=lambda x: (float(x @ x), 3.0 * x), dim=3)
        assert check_gradient(obj, np.ones(3)) > 0.3

    def test_analytical_model_objective(self, rng):
        topo = default_topology()
        V = rng.uniform(0, mesh.V_MAX, (25, 9))
        W = rng.uniform(-40, -2, (25, 9))
        obj = am_objective(V, W, topo)
        theta = pack_am(default_am_init(topo, seed=4))
        theta = theta + rng.normal(0, 0.05, theta.size)
        assert check_gradient(obj, theta) < 1e-6

    def test_network_objective(self, rng):
        net = network.init_params(Hyperparams(7, 5, 1e-3, 1e-4), seed=2)
        V = rng.uniform(0, mesh.V_MAX, (20, 9))
        W = rng.uniform(-40, -2, (20, 9))
        # keep every entry away from the L1 kink by more than the step
        theta = rng.choice([-1.0, 1.0], net.n_theta) * rng.uniform(
            0.05, 0.4, net.n_theta)

        def fun_grad(th):
            return network.cost(net, V, W, 1e-3, 1e-4, theta=th)

        err = check_gradient(Objective(fun_grad=fun_grad, dim=net.n_theta),
                             theta, step=1e-4)
        assert err < 1e-5


class TestAmParameterization:
    def test_pack_unpack_round_trip(self, rng):
        topo = default_topology()
        p = AnalyticalModelParams(
            alpha=rng.uniform(0.1, 0.9, (3, 3)), er=2000.0,
            phi0=rng.uniform(0, 2 * np.pi, 9), phi2=rng.normal(0.5, 0.2, (9, 9)))
        q = unpack_am(pack_am(p), topo)
        assert np.allclose(q.alpha, p.alpha, rtol=1e-12)
        assert abs(q.er - p.er) < 1e-9 * p.er
        assert np.allclose(q.phi0, p.phi0, rtol=0, atol=1e-12)
        assert np.allclose(q.phi2, p.phi2, rtol=0, atol=1e-12)

    def test_unpack_always_yields_valid_er(self):
        topo = default_topology()
        theta = pack_am(default_am_init(topo))
        for bad in (-1e6, -40.0, 0.0, 40.0, 1e6):
            theta[9] = bad
            assert unpack_am(theta, topo).er > 1.0

    def test_default_init(self):
        topo = default_topology()
        init = default_am_init(topo, seed=0)
        assert np.all(init.alpha == 0.25)
        assert math.isclose(init.er, 1000.0)
        diag = np.diag(init.phi2)
        assert np.allclose(diag, math.pi / mesh.V_MAX ** 2)
        assert np.all(init.phi2[~np.eye(9, dtype=bool)] == 0.0)
        assert np.all((init.phi0 >= 0) & (init.phi0 < 2 * math.pi))


def _noise_free_dataset():
    chip = default_chip(seed=11, noise_sigma_db=0.0, excess_sigma=0.0)
    return split(acquire(chip, 600, seed=42), 600, 80, seed=7)


@pytest.fixture(scope="module")
def recovered():
    ds = _noise_free_dataset()
    fit = fit_am(ds, default_topology(), n_restarts=8, seed=0, max_iter=300)
    return ds, fit


class TestFitAm:
    def test_self_consistency_near_truth(self, rng):
        topo = default_topology()
        phi2 = np.diag(rng.uniform(0.74, 0.83, 9)) + \
            rng.normal(0, 0.02, (9, 9)) * (1 - np.eye(9))
        truth = AnalyticalModelParams(
            alpha=rng.uniform(0.4, 0.8, (3, 3)), er=2000.0,
            phi0=rng.uniform(0, 2 * np.pi, 9), phi2=phi2)
        V = rng.uniform(0, mesh.V_MAX, (300, 9))
        W = eval_weights(truth, topo, V)
        assert not np.any(W <= mesh.DB_FLOOR)
        ds = Dataset(V, W, np.array(["train"] * 240 + ["validation"] * 60),
                     PROV_EXPERIMENTAL)
        init = AnalyticalModelParams(
            alpha=truth.alpha, er=truth.er,
            phi0=truth.phi0 + rng.normal(0, 0.05, 9), phi2=truth.phi2)
        fit = fit_am(ds, topo, init=init, n_restarts=1, max_iter=200)
        assert fit.train_rmse_db < 1e-6

    def test_recovery_from_generic_init(self, recovered):
        ds, fit = recovered
        topo = default_topology()
        Vt, Wt = ds.arrays(SPLIT_TEST)
        assert rmse_db(eval_weights(fit.params, topo, Vt), Wt) < 0.1

    def test_result_invariant_under_record_reordering(self, recovered):
        ds, fit = recovered
        perm = np.random.default_rng(99).permutation(len(ds))
        shuffled = Dataset(ds.voltages[perm], ds.weights_db[perm],
                           ds.split[perm], ds.provenance, n_sweep=0)
        fit2 = fit_am(shuffled, default_topology(), n_restarts=8, seed=0,
                      max_iter=300)
        assert abs(fit.train_rmse_db - fit2.train_rmse_db) < 1e-6

    def test_empty_train_split_rejected(self, rng):
        V = rng.uniform(0, 2, (5, 9))
        ds = Dataset(V, np.full((5, 9), -10.0), np.array(["test"] * 5),
                     PROV_EXPERIMENTAL)
        with pytest.raises(TrainingError, match="train split"):
            fit_am(ds, default_topology())

    def test_eval_weights_empty_batch(self):
        topo = default_topology()
        out = eval_weights(default_am_init(topo), topo, np.zeros((0, 9)))
        assert out.shape == (0, 9)


def test_fit_trace_is_recorded(recovered):
    _, fit = recovered
    assert fit.opt.trace.shape[1] == 4
    assert fit.opt.trace[0, 0] == 0
