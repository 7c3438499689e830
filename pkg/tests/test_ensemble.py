"""Ensemble combination math against independent oracles, plus the
resampling study plumbing."""

import numpy as np
import pytest

from mzimodel import (
    DataError,
    EnsembleModel,
    Hyperparams,
    acquire,
    fit_weights,
    percentile_report,
    predict,
    rmse_db,
    run_ensemble_study,
    split,
)
from mzimodel import network
from mzimodel.ensemble import (
    DEFAULT_RIDGE_GRID,
    combine,
    member_predictions,
    predict_batch,
)


def members_of(*seeds, n1=6, n2=5, scale=1.0):
    nets = []
    for s in seeds:
        base = network.init_params(Hyperparams(n1, n2), seed=s)
        nets.append(base.with_theta(scale * base.theta))
    return tuple(nets)


def gd_ridge(X, y, lam, tol=1e-10, max_steps=500_000):
    """Brute-force ridge oracle: plain gradient descent to a tiny gradient."""
    c = np.zeros(X.shape[1])
    step = 1.0 / (2.0 * (np.linalg.norm(X, 2) ** 2 + lam))
    for _ in range(max_steps):
        g = 2.0 * (X.T @ (X @ c - y)) + 2.0 * lam * c
        if np.max(np.abs(g)) < tol:
            return c
        c = c - step * g
    raise AssertionError("oracle did not converge")


class TestModelValidation:
    def test_needs_members(self):
        with pytest.raises(DataError, match="member"):
            EnsembleModel(())

    def test_simple_takes_no_weights(self):
        with pytest.raises(DataError, match="no weights"):
            EnsembleModel(members_of(1), weights=np.array([1.0]))

    def test_weighted_shape_checked(self):
        with pytest.raises(DataError, match="weights"):
            EnsembleModel(members_of(1, 2), "weighted", np.array([1.0]))
        ok = EnsembleModel(members_of(1, 2), "weighted", np.array([0.5, 0.5]))
        assert ok.weights.shape == (2,)
        per_out = EnsembleModel(members_of(1, 2), "weighted",
                                np.full((2, 9), 0.5))
        assert per_out.weights.shape == (2, 9)

    def test_unknown_combiner(self):
        with pytest.raises(DataError, match="combiner"):
            EnsembleModel(members_of(1), combiner="stacked")

    def test_negative_lambda(self):
        with pytest.raises(DataError, match="ridge_lambda"):
            EnsembleModel(members_of(1, 2), "weighted", np.array([0.5, 0.5]),
                          ridge_lambda=-1.0)


class TestCombine:
    def test_single_member_simple_is_the_member(self, rng):
        nets = members_of(3)
        V = rng.uniform(0, 2, (15, 9))
        ens = EnsembleModel(nets)
        assert np.array_equal(predict_batch(ens, V),
                              network.forward_batch(nets[0], V))

    def test_identical_members_average_to_one_member(self, rng):
        net = members_of(4)[0]
        V = rng.uniform(0, 2, (10, 9))
        ens = EnsembleModel((net, net, net))
        assert np.allclose(predict_batch(ens, V),
                           network.forward_batch(net, V), atol=1e-15)

    def test_degenerate_weights_select_member_two(self, rng):
        nets = members_of(5, 6)
        V = rng.uniform(0, 2, (10, 9))
        ens = EnsembleModel(nets, "weighted", np.array([0.0, 1.0]))
        assert np.array_equal(predict_batch(ens, V),
                              network.forward_batch(nets[1], V))

    def test_combination_is_the_stated_linear_rule(self, rng):
        preds = rng.normal(-10, 3, (4, 7, 9))
        c = rng.normal(0, 1, 4)
        ens = EnsembleModel(members_of(1, 2, 3, 4), "weighted", c)
        want = sum(c[k] * preds[k] for k in range(4))
        assert np.allclose(combine(ens, preds), want, atol=1e-12)

    def test_per_output_weights_apply_columnwise(self, rng):
        preds = rng.normal(-10, 3, (3, 6, 9))
        c = rng.normal(0, 1, (3, 9))
        ens = EnsembleModel(members_of(1, 2, 3), "weighted", c)
        got = combine(ens, preds)
        for o in range(9):
            want = sum(c[k, o] * preds[k, :, o] for k in range(3))
            assert np.allclose(got[:, o], want, atol=1e-12)

    def test_simple_average_never_beats_the_worst_member_backwards(self, rng):
        # convexity: rmse(mean of preds) <= max over members
        preds = rng.normal(-10, 2, (5, 30, 9))
        target = rng.normal(-10, 2, (30, 9))
        ens = EnsembleModel(members_of(1, 2, 3, 4, 5))
        worst = max(rmse_db(preds[k], target) for k in range(5))
        assert rmse_db(combine(ens, preds), target) <= worst + 1e-12

    def test_predict_reshapes_single_vector(self, rng):
        ens = EnsembleModel(members_of(7, 8))
        v = rng.uniform(0, 2, 9)
        out = predict(ens, v)
        assert out.shape == (3, 3)
        assert np.array_equal(out.ravel(), predict_batch(ens, v[None, :])[0])

    def test_member_predictions_shape(self, rng):
        p = member_predictions(members_of(1, 2, 3), rng.uniform(0, 2, (11, 9)))
        assert p.shape == (3, 11, 9)


class TestFitWeights:
    def test_perfect_single_member_gets_unit_weight(self, rng):
        nets = members_of(9, scale=3.0)
        V = rng.uniform(0, 2, (40, 9))
        target = network.forward_batch(nets[0], V)
        c, lam = fit_weights(nets, V, target, grid=(0.0,))
        assert lam == 0.0
        assert abs(c[0] - 1.0) < 1e-12

    @pytest.mark.parametrize("lam", [0.0, 1e-3, 10.0])
    def test_closed_form_matches_gradient_descent_oracle(self, rng, lam):
        nets = members_of(1, 2, 3, scale=3.0)
        V = rng.uniform(0, 2, (40, 9))
        target = rng.normal(-8, 3, (40, 9))
        c, _ = fit_weights(nets, V, target, grid=(lam,))
        X = member_predictions(nets, V).reshape(3, -1).T
        c_oracle = gd_ridge(X, target.ravel(), lam)
        assert np.max(np.abs(c - c_oracle)) < 1e-8

    def test_heavy_shrinkage_kills_the_weights(self, rng):
        nets = members_of(1, 2, scale=3.0)
        V = rng.uniform(0, 2, (30, 9))
        target = rng.normal(-8, 3, (30, 9))
        c, lam = fit_weights(nets, V, target, grid=(1e9,))
        assert lam == 1e9
        assert np.max(np.abs(c)) < 1e-4
        ens = EnsembleModel(nets, "weighted", c, lam)
        zero_rmse = rmse_db(np.zeros_like(target), target)
        assert rmse_db(predict_batch(ens, V), target) == pytest.approx(
            zero_rmse, rel=1e-3)

    def test_duplicate_members_fall_back_with_warning(self, rng):
        net = members_of(2, scale=3.0)[0]
        V = rng.uniform(0, 2, (25, 9))
        target = rng.normal(-8, 3, (25, 9))
        with pytest.warns(RuntimeWarning, match="singular"):
            c, lam = fit_weights((net, net), V, target, grid=(0.0, 1e-6, 1.0))
        assert lam > 0.0

    def test_lambda_chosen_by_validation_rmse(self, rng):
        nets = members_of(4, 5, 6, scale=3.0)
        V = rng.uniform(0, 2, (40, 9))
        target = rng.normal(-8, 3, (40, 9))
        grid = (0.0, 1e-2, 1e2)
        c, lam = fit_weights(nets, V, target, grid=grid)
        scores = {}
        for trial in grid:
            ct, _ = fit_weights(nets, V, target, grid=(trial,))
            ens = EnsembleModel(nets, "weighted", ct, trial)
            scores[trial] = rmse_db(predict_batch(ens, V), target)
        assert lam == min(scores, key=scores.get)

    def test_per_output_fit_is_at_least_as_good_on_its_own_data(self, rng):
        nets = members_of(1, 2, 3, scale=3.0)
        V = rng.uniform(0, 2, (40, 9))
        target = rng.normal(-8, 3, (40, 9))
        c_shared, lam_s = fit_weights(nets, V, target)
        c_per, lam_p = fit_weights(nets, V, target, per_output=True)
        assert c_per.shape == (3, 9)
        r_shared = rmse_db(predict_batch(
            EnsembleModel(nets, "weighted", c_shared, lam_s), V), target)
        r_per = rmse_db(predict_batch(
            EnsembleModel(nets, "weighted", c_per, lam_p), V), target)
        assert r_per <= r_shared + 1e-12

    def test_empty_validation_rejected(self):
        with pytest.raises(DataError, match="validation"):
            fit_weights(members_of(1), np.zeros((0, 9)), np.zeros((0, 9)))

    def test_default_grid_shape(self):
        assert DEFAULT_RIDGE_GRID[0] == 0.0
        assert len(DEFAULT_RIDGE_GRID) == 11
        assert DEFAULT_RIDGE_GRID[1] == pytest.approx(1e-6)
        assert DEFAULT_RIDGE_GRID[-1] == pytest.approx(1e3)


class TestPercentiles:
    def test_matches_numpy_linear_interpolation(self, rng):
        vals = rng.normal(0, 1, 37)
        rep = percentile_report(vals)
        assert list(rep) == ["p10", "p25", "p50", "p75", "p90"]
        for q, key in ((10, "p10"), (25, "p25"), (50, "p50"), (75, "p75"),
                       (90, "p90")):
            assert rep[key] == np.percentile(vals, q)

    def test_monotone(self, rng):
        rep = percentile_report(rng.normal(0, 5, 101))
        vals = [rep[k] for k in ("p10", "p25", "p50", "p75", "p90")]
        assert vals == sorted(vals)

    def test_empty_group_rejected(self):
        with pytest.raises(DataError, match="empty"):
            percentile_report([])


@pytest.fixture(scope="module")
def study_dataset(chip0):
    return split(acquire(chip0, 260, seed=3), 260, 40, seed=1)


class TestStudy:
    def test_small_study_end_to_end(self, study_dataset, tmp_path):
        report = run_ensemble_study(
            study_dataset, sizes=(220,), k_max=3, runs=2,
            hp=Hyperparams(8, 8, 1e-3, 1e-5), max_iter=40, seed=0,
            out_dir=tmp_path)
        assert report.n_failures == 0
        assert len(report.rows) == 2 * 3 * 2  # runs x K x combiners
        med = report.medians(220, "simple")
        assert sorted(med) == [1, 2, 3]
        assert all(np.isfinite(v) for v in med.values())

        runs_csv = (tmp_path / "ensemble_runs_220.csv").read_text().splitlines()
        assert runs_csv[0] == "combiner,K,run,test_rmse_db"
        assert len(runs_csv) == 1 + len(report.rows)
        summary_csv = (tmp_path / "ensemble_summary_220.csv").read_text().splitlines()
        assert summary_csv[0] == "combiner,K,p10,p25,p50,p75,p90"
        assert len(summary_csv) == 1 + 2 * 3

    def test_study_is_deterministic(self, study_dataset):
        kw = dict(sizes=(220,), k_max=2, runs=1,
                  hp=Hyperparams(8, 8, 1e-3, 1e-5), max_iter=30, seed=4)
        a = run_ensemble_study(study_dataset, **kw)
        b = run_ensemble_study(study_dataset, **kw)
        assert a.rows == b.rows

    def test_needs_validation_and_test_splits(self, chip0):
        train_only = acquire(chip0, 50, seed=2)
        with pytest.raises(DataError, match="splits"):
            run_ensemble_study(train_only, sizes=(200,), k_max=2, runs=1)
