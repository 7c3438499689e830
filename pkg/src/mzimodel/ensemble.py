"""Combine independently trained surrogate nets by simple or ridge-weighted
averaging, and run the variance-reduction study across many resampled
training subsets.
"""

import csv
import os
import warnings

import numpy as np
from dataclasses import dataclass, field

from . import network
from .data import (SPLIT_TEST, SPLIT_TRAIN, SPLIT_VALIDATION, rmse_db,
                   sample_training_subset)
from .errors import DataError, TrainingError

COMBINERS = ("simple", "weighted")

# lambda grid for the ridge combiner: exact least squares plus ten decades
DEFAULT_RIDGE_GRID = tuple([0.0] + list(np.logspace(-6.0, 3.0, 10)))


@dataclass(frozen=True)
class EnsembleModel:
    """K member nets plus a linear rule for merging their dB predictions.

    weights is None in simple mode (effectively 1/K each); in weighted mode
    it is (K,) shared across outputs, or (K, 9) when fitted per output.
    """

    members: tuple
    combiner: str = "simple"
    weights: np.ndarray = None
    ridge_lambda: float = 0.0

    def __post_init__(self):
        if len(self.members) < 1:
            raise DataError("ensemble needs at least one member")
        if self.combiner not in COMBINERS:
            raise DataError(f"unknown combiner {self.combiner!r}")
        if self.ridge_lambda < 0:
            raise DataError("ridge_lambda must be >= 0")
        if self.combiner == "weighted":
            w = np.asarray(self.weights, dtype=float)
            if w.shape not in ((len(self.members),),
                               (len(self.members), self.members[0].n_out)):
                raise DataError("weights must be (K,) or (K, n_out)")
            object.__setattr__(self, "weights", w)
        elif self.weights is not None:
            raise DataError("simple combiner takes no weights")


def member_predictions(members, voltages):
    """Stacked member outputs, shape (K, L, 9)."""
    return np.stack([network.forward_batch(m, voltages) for m in members])


def combine(ens, preds):
    # preds: (K, L, 9) -> (L, 9)
    if ens.combiner == "simple":
        return preds.mean(axis=0)
    if ens.weights.ndim == 1:
        return np.tensordot(ens.weights, preds, axes=(0, 0))
    return np.einsum("ko,klo->lo", ens.weights, preds)


def predict_batch(ens, voltages):
    return combine(ens, member_predictions(ens.members, voltages))


def predict(ens, v):
    v = np.asarray(v, dtype=float)
    return predict_batch(ens, v[None, :]).reshape(3, 3)


def _ridge_solve(X, y, lam):
    A = X.T @ X
    A[np.diag_indices_from(A)] += lam
    c = np.linalg.solve(A, X.T @ y)
    if not np.all(np.isfinite(c)):
        raise np.linalg.LinAlgError("non-finite solution")
    return c


def fit_weights(members, val_voltages, val_weights_db, grid=DEFAULT_RIDGE_GRID,
                per_output=False):
    """Ridge-regress member predictions onto the true validation weights.

    No intercept. The ridge parameter is picked from the grid by combined
    validation RMSE; an exactly singular system at lambda = 0 drops that
    grid point with a warning. Returns (weights, chosen_lambda).
    """
    if len(val_voltages) == 0:
        raise DataError("validation split is empty")
    preds = member_predictions(members, val_voltages)     # (K, L, 9)
    return _fit_weights_from_preds(preds, val_weights_db, per_output, grid)


def percentile_report(values):
    """{p10, p25, p50, p75, p90} with linear interpolation."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise DataError("empty group")
    q = np.percentile(v, [10, 25, 50, 75, 90])
    return {"p10": q[0], "p25": q[1], "p50": q[2], "p75": q[3], "p90": q[4]}


# ---------------------------------------------------------------------------
# resampling study

@dataclass
class StudyReport:
    rows: list = field(default_factory=list)      # (size, combiner, K, run, rmse)
    summary: list = field(default_factory=list)   # (size, combiner, K, percentiles)
    n_failures: int = 0

    def medians(self, size, combiner):
        out = {}
        for s, c, k, pcts in self.summary:
            if s == size and c == combiner:
                out[k] = pcts["p50"]
        return out


def run_ensemble_study(dataset, sizes, k_max, runs, hp=None, max_iter=200,
                       seed=0, per_output=False, out_dir=None, progress=None):
    """Train K_max members per resampled subset and score both combiners at
    every K = 1..K_max on the test split.

    Member nets differ only by init seed; the subset redraw differs by run.
    Individual member-training failures are recorded and excluded.
    """
    hp = hp or network.Hyperparams(83, 131, 1e-2, 1e-4)
    V_va, W_va = dataset.arrays(SPLIT_VALIDATION)
    V_te, W_te = dataset.arrays(SPLIT_TEST)
    if not len(V_va) or not len(V_te):
        raise DataError("study needs validation and test splits")

    report = StudyReport()
    for size in sizes:
        for run in range(runs):
            rng = np.random.default_rng(
                np.random.SeedSequence([int(seed), int(size), int(run)]))
            sub = dataset.subset(sample_training_subset(dataset, size, rng))
            V_tr, W_tr = sub.arrays(SPLIT_TRAIN)

            members = []
            for k in range(k_max):
                member_seed = int(rng.integers(2**63))
                try:
                    net = network.init_params(hp, seed=member_seed)
                    net, _ = network.train(net, V_tr, W_tr, V_va, W_va,
                                           hp.lambda_l1, hp.lambda_l2,
                                           max_iter=max_iter)
                    members.append(net)
                except TrainingError:
                    report.n_failures += 1
            if not members:
                continue

            pv = member_predictions(members, V_va)
            pt = member_predictions(members, V_te)
            for K in range(1, len(members) + 1):
                simple = EnsembleModel(tuple(members[:K]))
                r_s = rmse_db(combine(simple, pt[:K]), W_te)
                report.rows.append((size, "simple", K, run, r_s))
                c, lam = _fit_weights_from_preds(pv[:K], W_va, per_output)
                weighted = EnsembleModel(tuple(members[:K]), "weighted", c, lam)
                r_w = rmse_db(combine(weighted, pt[:K]), W_te)
                report.rows.append((size, "weighted", K, run, r_w))
            if progress:
                progress(size, run, len(members))

        for combiner in COMBINERS:
            for K in range(1, k_max + 1):
                vals = [r for s, c, k, _, r in report.rows
                        if s == size and c == combiner and k == K]
                if vals:
                    report.summary.append((size, combiner, K,
                                           percentile_report(vals)))

    if out_dir is not None:
        save_study(report, out_dir)
    return report


def _fit_weights_from_preds(preds, target, per_output, grid=DEFAULT_RIDGE_GRID):
    K = preds.shape[0]
    target = np.asarray(target, dtype=float)
    best = None
    for lam in grid:
        try:
            if per_output:
                c = np.empty((K, preds.shape[2]))
                for o in range(preds.shape[2]):
                    c[:, o] = _ridge_solve(preds[:, :, o].T, target[:, o], lam)
                fit = np.einsum("ko,klo->lo", c, preds)
            else:
                c = _ridge_solve(preds.reshape(K, -1).T, target.ravel(), lam)
                fit = np.tensordot(c, preds, axes=(0, 0))
        except np.linalg.LinAlgError:
            if lam == 0.0:
                warnings.warn("singular system at lambda=0; falling back to "
                              "smallest positive lambda", RuntimeWarning)
                continue
            raise
        r = rmse_db(fit, target)
        if best is None or r < best[0]:
            best = (r, c, float(lam))
    if best is None:
        raise TrainingError("ridge fit failed at every grid lambda")
    return best[1], best[2]


def save_study(report, out_dir):
    """One runs CSV and one percentile-summary CSV per training size."""
    os.makedirs(out_dir, exist_ok=True)
    for size in sorted({r[0] for r in report.rows}):
        with open(os.path.join(out_dir, f"ensemble_runs_{size}.csv"), "w",
                  newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["combiner", "K", "run", "test_rmse_db"])
            for s, c, k, run, r in report.rows:
                if s == size:
                    w.writerow([c, k, run, f"{r:.9g}"])
        with open(os.path.join(out_dir, f"ensemble_summary_{size}.csv"), "w",
                  newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["combiner", "K", "p10", "p25", "p50", "p75", "p90"])
            for s, c, k, p in report.summary:
                if s == size:
                    w.writerow([c, k] + [f"{p[q]:.9g}"
                                         for q in ("p10", "p25", "p50", "p75", "p90")])
