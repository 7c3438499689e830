"""Data-scarcity study and hyperparameter grid search.

The scarcity study trains the three model families on identical training
subsets: the subset for cell (size, seed) is drawn once, before the family
dispatch, so family comparisons are paired. Cells are independent and can be
farmed out to worker processes.
"""

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import network
from .data import (SPLIT_TEST, SPLIT_TRAIN, SPLIT_VALIDATION, rmse_db,
                   sample_training_subset)
from .ensemble import percentile_report
from .errors import DataError, TrainingError
from .optimize import eval_weights, fit_am
from .transfer import TlConfig, train_tl_nn

FAMILIES = ("am", "nn", "tl")

# hyperparameter re-optimization grids; the defaults explore around the
# shipped optima
DEFAULT_SIZE_GRID = (32, 64, 83, 128, 131, 256, 400)
DEFAULT_LAMBDA_GRID = (0.0,) + tuple(np.logspace(-9.0, -1.0, 12))


@dataclass
class ScarcityReport:
    rows: list = field(default_factory=list)      # (family, size, seed, rmse)
    failures: list = field(default_factory=list)  # (family, size, seed, message)
    summary: list = field(default_factory=list)   # (family, size, percentiles)

    def medians(self, family):
        return {size: pcts["p50"] for fam, size, pcts in self.summary
                if fam == family}


def nn_hyperparams(cfg, size):
    """Regularization switches with the training-set size (strong when scarce)."""
    c = cfg["nn"]
    if size <= c["small_max_size"]:
        return network.Hyperparams(c["n1"], c["n2"],
                                   c["small_lambda_l1"], c["small_lambda_l2"])
    return network.Hyperparams(c["n1"], c["n2"], c["lambda_l1"], c["lambda_l2"])


def tl_config_from(cfg, seed=0):
    c = cfg["tl"]
    return TlConfig(synth_count=c["synth_count"],
                    synth_filter_floor_db=c["synth_floor_db"],
                    synth_validation_n=c["synth_validation_n"],
                    freeze_spec=tuple(zip(c["freeze_layers"], c["freeze_fractions"])),
                    am_restarts=c["am_restarts"], am_max_iter=c["am_max_iter"],
                    pretrain_max_iter=c["pretrain_max_iter"],
                    retrain_max_iter=c["retrain_max_iter"], seed=seed)


def cell_rmse(dataset, topo, cfg, family, size, seed_index, master_seed):
    """Train one (family, size, seed) cell and score it on the test split."""
    rng = np.random.default_rng(
        np.random.SeedSequence([int(master_seed), int(size), int(seed_index)]))
    idx = sample_training_subset(dataset, size, rng)
    val_idx = np.flatnonzero(dataset.mask(SPLIT_VALIDATION))
    cell_ds = dataset.subset(np.concatenate([idx, val_idx]))
    V_te, W_te = dataset.arrays(SPLIT_TEST)
    seed = int(np.random.SeedSequence(
        [int(master_seed), int(size), int(seed_index),
         FAMILIES.index(family)]).generate_state(1)[0])

    if family == "am":
        c = cfg["am"]
        fit = fit_am(cell_ds, topo, n_restarts=c["restarts"], seed=seed,
                     max_iter=c["max_iter"], gtol=c["gtol"], ftol=c["ftol"],
                     memory=c["memory"])
        pred = eval_weights(fit.params, topo, V_te)
    elif family == "nn":
        hp = nn_hyperparams(cfg, size)
        c = cfg["nn"]
        net = network.init_params(hp, seed=seed)
        V_tr, W_tr = cell_ds.arrays(SPLIT_TRAIN)
        V_va, W_va = cell_ds.arrays(SPLIT_VALIDATION)
        net, _ = network.train(net, V_tr, W_tr, V_va, W_va, hp.lambda_l1,
                               hp.lambda_l2, max_iter=c["max_iter"],
                               gtol=c["gtol"], ftol=c["ftol"], memory=c["memory"])
        pred = network.forward_batch(net, V_te)
    elif family == "tl":
        c = cfg["tl"]
        hp = network.Hyperparams(c["n1"], c["n2"], c["lambda_l1"], c["lambda_l2"])
        res = train_tl_nn(cell_ds, topo, hp, tl_config_from(cfg, seed=seed))
        pred = network.forward_batch(res.net, V_te)
    else:
        raise DataError(f"unknown family {family!r}")
    return rmse_db(pred, W_te)


_STATE = {}


def _init_worker(dataset, topo, cfg, master_seed):
    _STATE["args"] = (dataset, topo, cfg, master_seed)


def _run_cell(task):
    family, size, seed_index = task
    dataset, topo, cfg, master_seed = _STATE["args"]
    try:
        return cell_rmse(dataset, topo, cfg, family, size, seed_index,
                         master_seed), None
    except (TrainingError, ValueError, ArithmeticError) as e:
        return None, str(e)


def run_scarcity(dataset, topo, cfg, jobs=1, out_dir=None, progress=None):
    """families x sizes x seeds grid; returns rows, failures, percentiles."""
    sc = cfg["scarcity"]
    master_seed = cfg["run"]["seed"]
    if not len(dataset.arrays(SPLIT_TEST)[0]):
        raise DataError("scarcity study needs a test split")
    tasks = [(family, size, i) for family in sc["families"]
             for size in sc["sizes"] for i in range(sc["seeds"])]

    _init_worker(dataset, topo, cfg, master_seed)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                                 initargs=_STATE["args"]) as pool:
            results = list(pool.map(_run_cell, tasks))
    else:
        results = [_run_cell(t) for t in tasks]

    report = ScarcityReport()
    for (family, size, i), (rmse, err) in zip(tasks, results):
        if err is None:
            report.rows.append((family, size, i, rmse))
        else:
            report.failures.append((family, size, i, err))
        if progress:
            progress(family, size, i, rmse, err)
    for family in sc["families"]:
        for size in sc["sizes"]:
            vals = [r for f, s, _, r in report.rows if f == family and s == size]
            if vals:
                report.summary.append((family, size, percentile_report(vals)))
    if out_dir is not None:
        save_scarcity(report, out_dir)
    return report


def save_scarcity(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "scarcity_runs.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["family", "size", "seed", "test_rmse_db"])
        for family, size, i, r in report.rows:
            w.writerow([family, size, i, f"{r:.9g}"])
    with open(os.path.join(out_dir, "scarcity_summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["family", "size", "n_ok", "n_failed",
                    "p10", "p25", "p50", "p75", "p90"])
        for family, size, pcts in report.summary:
            n_ok = sum(1 for f, s, _, _ in report.rows if f == family and s == size)
            n_bad = sum(1 for f, s, _, _ in report.failures
                        if f == family and s == size)
            w.writerow([family, size, n_ok, n_bad]
                       + [f"{pcts[q]:.9g}" for q in ("p10", "p25", "p50", "p75", "p90")])


def grid_search(dataset, sizes=DEFAULT_SIZE_GRID, lambda_grid=DEFAULT_LAMBDA_GRID,
                max_iter=300, seed=0, out_path=None, progress=None):
    """Exhaustive (n1, n2, l1, l2) sweep selected on validation RMSE.

    The full default grid is large; pass reduced grids for quick scans.
    Returns (best Hyperparams, rows) with rows (n1, n2, l1, l2, val_rmse).
    """
    V_tr, W_tr = dataset.arrays(SPLIT_TRAIN)
    V_va, W_va = dataset.arrays(SPLIT_VALIDATION)
    if not len(V_va):
        raise DataError("grid search needs a validation split")
    rows = []
    best = None
    for n1 in sizes:
        for n2 in sizes:
            for l1 in lambda_grid:
                for l2 in lambda_grid:
                    hp = network.Hyperparams(n1, n2, l1, l2)
                    net = network.init_params(hp, seed=seed)
                    net, hist = network.train(net, V_tr, W_tr, V_va, W_va,
                                              l1, l2, max_iter=max_iter)
                    r = hist.best_validation_rmse
                    rows.append((n1, n2, l1, l2, r))
                    if best is None or r < best[0]:
                        best = (r, hp)
                    if progress:
                        progress(n1, n2, l1, l2, r)
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n1", "n2", "lambda_l1", "lambda_l2", "validation_rmse_db"])
            for row in rows:
                w.writerow([row[0], row[1], f"{row[2]:.9g}", f"{row[3]:.9g}",
                            f"{row[4]:.9g}"])
    return best[1], rows
