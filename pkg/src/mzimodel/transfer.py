"""Transfer-learning pipeline: physics fit -> synthetic corpus -> pre-train
-> freeze -> re-train.

The four stages run strictly in order. The same seed drives the physics-fit
restarts, the synthetic voltage draws, and the network init, so a pipeline
run is reproducible end to end. Artifacts of every stage can be written to a
run directory for audit.
"""

import hashlib
import json
import math
import os

import numpy as np
from dataclasses import dataclass, field, replace

from . import chip as chipmod
from . import network
from .data import (PROV_SYNTHETIC, SPLIT_TRAIN, SPLIT_VALIDATION, Dataset,
                   rmse_db, save_csv)
from .errors import StageError, TrainingError
from .optimize import eval_weights, fit_am

STAGES = ("fit_am", "generate_synthetic", "pretrain", "retrain")


@dataclass(frozen=True)
class TlConfig:
    """Knobs of the pipeline; defaults follow the experimental recipe."""

    synth_count: int = 50000
    synth_filter_floor_db: float = -60.0
    synth_validation_n: int = 500      # carved from the synthetic set for early selection
    # freeze_spec: fraction of each layer's parameters (weights and biases)
    # fixed after pre-training, by layer index 1..3; default locks the whole
    # first hidden layer
    freeze_spec: tuple = ((1, 1.0),)
    am_restarts: int = 16
    am_max_iter: int = 300
    pretrain_max_iter: int = 300
    retrain_max_iter: int = 800
    seed: int = 0

    def __post_init__(self):
        if self.synth_count < 1:
            raise TrainingError("synth_count must be >= 1")
        if self.synth_validation_n < 0 or self.synth_validation_n >= self.synth_count:
            raise TrainingError("synth_validation_n must be in [0, synth_count)")
        for layer, frac in self.freeze_spec:
            if layer not in (1, 2, 3):
                raise TrainingError(f"freeze_spec layer {layer} outside 1..3")
            if not 0.0 <= frac <= 1.0:
                raise TrainingError("freeze fractions must lie in [0, 1]")


def generate_synthetic(am_params, topo, count, floor_db=-60.0, rng=0):
    """Uniform voltages through the fitted model, record-filtered at the floor.

    A record is dropped when ANY of its 9 weights falls below floor_db.
    Returns (dataset, drop_fraction); aborts when more than half the records
    drop, which means the fitted model is pathological.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    V = rng.uniform(0.0, chipmod.mesh.V_MAX, (int(count), topo.n_mzi))
    W = eval_weights(am_params, topo, V)
    keep = ~np.any(W < floor_db, axis=1)
    drop_fraction = 1.0 - float(np.count_nonzero(keep)) / count
    if drop_fraction > 0.5:
        raise TrainingError(
            f"synthetic filter dropped {100 * drop_fraction:.1f}% of records; "
            "fitted model predicts implausibly deep nulls")
    ds = Dataset(V[keep], W[keep], np.full(int(np.count_nonzero(keep)), SPLIT_TRAIN),
                 PROV_SYNTHETIC)
    return ds, drop_fraction


def build_freeze_mask(net, freeze_spec):
    """Boolean mask over theta from per-layer freeze fractions.

    A fraction f freezes the leading ceil(f * n) entries of that layer's
    weight block and bias block; f = 1.0 freezes the whole layer.
    """
    mask = np.zeros(net.n_theta, dtype=bool)
    slices = network.layer_slices(net)
    for layer, frac in freeze_spec:
        (wa, wb), (ba, bb) = slices[layer - 1]
        mask[wa:wa + math.ceil(frac * (wb - wa))] = True
        mask[ba:ba + math.ceil(frac * (bb - ba))] = True
    return mask


@dataclass
class TlResult:
    net: "network.SurrogateNet"
    am: object                     # AmFitResult
    pretrained: "network.SurrogateNet"
    drop_fraction: float
    synth_digest: str
    synth_count_kept: int
    metrics: dict
    retrain_history: object = field(repr=False, default=None)


def _stage(name):
    def deco(fn):
        def run(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as e:
                raise StageError(name, str(e)) from e
        return run
    return deco


def train_tl_nn(exp_dataset, topo, hp, cfg=None, out_dir=None, dump_synth=False):
    """Run the four stages on an experimental dataset with train/validation
    splits. Returns the final net plus all audit artifacts; any stage failure
    raises StageError carrying the stage name."""
    cfg = cfg or TlConfig()
    if exp_dataset.count(SPLIT_TRAIN) == 0:
        raise StageError("fit_am", "train split is empty")

    am = _stage("fit_am")(fit_am)(
        exp_dataset, topo, n_restarts=cfg.am_restarts, seed=cfg.seed,
        max_iter=cfg.am_max_iter)

    synth_rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0x51D7]))
    synth, drop = _stage("generate_synthetic")(generate_synthetic)(
        am.params, topo, cfg.synth_count, cfg.synth_filter_floor_db, synth_rng)
    digest = hashlib.sha256(np.ascontiguousarray(synth.voltages).tobytes()
                            + np.ascontiguousarray(synth.weights_db).tobytes()).hexdigest()

    # last records of the synthetic pool serve as its validation carve
    n_val = min(cfg.synth_validation_n, max(len(synth) - 1, 0))
    Vs, Ws = synth.voltages, synth.weights_db
    Vp, Wp = Vs[:len(synth) - n_val], Ws[:len(synth) - n_val]
    Vq, Wq = Vs[len(synth) - n_val:], Ws[len(synth) - n_val:]

    @_stage("pretrain")
    def _pretrain():
        fresh = network.init_params(hp, seed=cfg.seed)
        return network.train(fresh, Vp, Wp, Vq, Wq, hp.lambda_l1, hp.lambda_l2,
                             max_iter=cfg.pretrain_max_iter)
    pre, pre_hist = _pretrain()

    @_stage("retrain")
    def _retrain():
        mask = build_freeze_mask(pre, cfg.freeze_spec)
        frozen = network.SurrogateNet(n1=pre.n1, n2=pre.n2, theta=pre.theta,
                                      freeze_mask=mask, v_max=pre.v_max,
                                      n_in=pre.n_in, n_out=pre.n_out)
        V_tr, W_tr = exp_dataset.arrays(SPLIT_TRAIN)
        V_va, W_va = exp_dataset.arrays(SPLIT_VALIDATION)
        return network.train(frozen, V_tr, W_tr, V_va, W_va, hp.lambda_l1,
                             hp.lambda_l2, max_iter=cfg.retrain_max_iter)
    final, re_hist = _retrain()

    V_tr, W_tr = exp_dataset.arrays(SPLIT_TRAIN)
    V_va, W_va = exp_dataset.arrays(SPLIT_VALIDATION)
    metrics = {
        "am_train_rmse_db": am.train_rmse_db,
        "am_validation_rmse_db": am.validation_rmse_db,
        "synth_count_kept": len(synth),
        "synth_drop_fraction": drop,
        "pretrain_validation_rmse_db": pre_hist.best_validation_rmse,
        "train_rmse_db": rmse_db(network.forward_batch(final, V_tr), W_tr),
    }
    if len(V_va):
        metrics["validation_rmse_db"] = rmse_db(network.forward_batch(final, V_va), W_va)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        chipmod.save_am(am.params, os.path.join(out_dir, "am.json"))
        network.save_net(pre, os.path.join(out_dir, "pretrained.json"))
        network.save_net(final, os.path.join(out_dir, "final.json"))
        with open(os.path.join(out_dir, "synth_digest.json"), "w") as fh:
            json.dump({"sha256": digest, "count_kept": len(synth),
                       "drop_fraction": drop}, fh, indent=1)
            fh.write("\n")
        if dump_synth:
            save_csv(synth, os.path.join(out_dir, "synth.csv"))
        with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
            json.dump(metrics, fh, indent=1)
            fh.write("\n")

    return TlResult(net=final, am=am, pretrained=pre, drop_fraction=drop,
                    synth_digest=digest, synth_count_kept=len(synth),
                    metrics=metrics, retrain_history=re_hist)
