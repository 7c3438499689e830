"""Command-line surface.

Every command is driven by a TOML config plus a handful of flags, trains
from saved CSVs (never from a chip's hidden parameters), and is reproducible
from (config, seed): artifact bytes match across re-runs, with timestamps
quarantined in meta.json.

Exit codes: 0 ok, 2 config problem, 3 data problem, 4 training failure.
"""

import argparse
import datetime
import json
import os
import sys

import numpy as np

from . import chip as chipmod
from . import ensemble, experiments, mesh, network
from .config import load_config
from .data import (SPLIT_TEST, SPLIT_TRAIN, SPLIT_VALIDATION, concat,
                   load_csv, rmse_db, sample_training_subset, save_csv,
                   split as split_dataset)
from .errors import ConfigError, DataError, TrainingError
from .optimize import eval_weights, fit_am, trace_to_csv
from .transfer import train_tl_nn

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4


def _out_dir(args, cfg):
    out = args.out or cfg["run"]["out_dir"]
    os.makedirs(out, exist_ok=True)
    return out


def _write_meta(out, command, cfg):
    # the only artifact allowed to differ between identical re-runs
    doc = {"command": command, "seed": cfg["run"]["seed"],
           "created": datetime.datetime.now(datetime.timezone.utc).isoformat()}
    with open(os.path.join(out, "meta.json"), "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _write_metrics(out, metrics):
    with open(os.path.join(out, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _print_metrics(metrics):
    for key in sorted(metrics):
        value = metrics[key]
        if isinstance(value, float):
            print(f"{key} = {value:.4f}")
        else:
            print(f"{key} = {value}")


def _n_sweep(cfg):
    step = cfg["dataset"]["sweep_step"]
    return mesh.N_MZI * (int(round(mesh.V_MAX / step)) + 1)


def _load_train(cfg):
    path = cfg["dataset"]["train_path"]
    if not os.path.exists(path):
        raise DataError(f"training CSV not found: {path} (run dataset-gen first)")
    return load_csv(path, n_sweep=_n_sweep(cfg))


def _load_test(cfg, required=False):
    path = cfg["dataset"]["test_path"]
    if not os.path.exists(path):
        if required:
            raise DataError(f"test CSV not found: {path}")
        return None
    return load_csv(path)


def _maybe_subset(ds, size, seed):
    if size <= 0:
        return ds
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(size)]))
    idx = sample_training_subset(ds, size, rng)
    keep = np.concatenate([idx, np.flatnonzero(ds.mask(SPLIT_VALIDATION))])
    return ds.subset(keep)


def _cmd_chip_new(args, cfg):
    out = _out_dir(args, cfg)
    path = cfg["chip"]["path"]
    if os.path.exists(path) and not args.force:
        raise DataError(f"refusing to overwrite {path} (use --force)")
    c = cfg["chip"]
    chip = chipmod.default_chip(seed=c["seed"], noise_sigma_db=c["noise_sigma_db"],
                                excess_sigma=c["excess_sigma"], er=c["er"])
    chip = chipmod.VirtualChip(params=chip.params, topo=chip.topo,
                               excess_crosstalk=chip.excess_crosstalk,
                               crosstalk_scale=c["crosstalk_scale"],
                               noise_sigma_db=chip.noise_sigma_db, seed=chip.seed)
    chipmod.save_chip(chip, path)
    _write_meta(out, "chip-new", cfg)
    # public summary only; the simulated device's internals stay hidden
    print(f"chip: {chip.topo.n_outputs}x{chip.topo.n_inputs} mesh, "
          f"{chip.topo.n_mzi} MZIs, seed {chip.seed}, "
          f"noise {chip.noise_sigma_db:.4f} dB -> {path}")
    return EXIT_OK


def _cmd_dataset_gen(args, cfg):
    out = _out_dir(args, cfg)
    d = cfg["dataset"]
    if not os.path.exists(cfg["chip"]["path"]):
        raise DataError(f"chip spec not found: {cfg['chip']['path']}")
    chip = chipmod.load_chip(cfg["chip"]["path"])
    n_sweep = _n_sweep(cfg)
    if d["sweep_only"]:
        ds = chipmod.acquire(chip, 0, d["acquire_seed"], step=d["sweep_step"],
                             rest_level=d["rest_voltage"])
        save_csv(ds, d["train_path"])
        _write_meta(out, "dataset-gen", cfg)
        print(f"sweep only: {len(ds)} records -> {d['train_path']}")
        return EXIT_OK
    if d["train_n"] < n_sweep:
        raise DataError(f"train_n={d['train_n']} below the {n_sweep} sweep records")
    n_random = d["train_n"] - n_sweep + d["validation_n"] + d["test_n"]
    full = chipmod.acquire(chip, n_random, d["acquire_seed"], step=d["sweep_step"],
                           rest_level=d["rest_voltage"])
    ds = split_dataset(full, d["train_n"], d["validation_n"], seed=d["split_seed"])
    save_csv(ds.where(SPLIT_TRAIN, SPLIT_VALIDATION), d["train_path"])
    save_csv(ds.where(SPLIT_TEST), d["test_path"])
    _write_meta(out, "dataset-gen", cfg)
    print(f"train {ds.count(SPLIT_TRAIN)} ({n_sweep} sweep), "
          f"validation {ds.count(SPLIT_VALIDATION)} -> {d['train_path']}; "
          f"test {ds.count(SPLIT_TEST)} -> {d['test_path']}")
    return EXIT_OK


def _cmd_fit_am(args, cfg):
    out = _out_dir(args, cfg)
    ds = _maybe_subset(_load_train(cfg), cfg["am"]["subset_size"],
                       cfg["run"]["seed"])
    c = cfg["am"]
    fit = fit_am(ds, mesh.default_topology(), n_restarts=c["restarts"],
                 seed=cfg["run"]["seed"], max_iter=c["max_iter"], gtol=c["gtol"],
                 ftol=c["ftol"], memory=c["memory"])
    chipmod.save_am(fit.params, os.path.join(out, "am.json"))
    trace_to_csv(fit.opt.trace, os.path.join(out, "fit_trace.csv"))
    metrics = {"train_rmse_db": fit.train_rmse_db,
               "validation_rmse_db": fit.validation_rmse_db,
               "restart_index": fit.restart_index}
    test = _load_test(cfg)
    if test is not None:
        V, W = test.voltages, test.weights_db
        metrics["test_rmse_db"] = rmse_db(
            eval_weights(fit.params, mesh.default_topology(), V), W)
    _write_metrics(out, metrics)
    _write_meta(out, "fit-am", cfg)
    _print_metrics(metrics)
    return EXIT_OK


def _cmd_train_nn(args, cfg):
    out = _out_dir(args, cfg)
    ds = _maybe_subset(_load_train(cfg), cfg["nn"]["subset_size"],
                       cfg["run"]["seed"])
    c = cfg["nn"]
    size = ds.count(SPLIT_TRAIN)
    hp = experiments.nn_hyperparams(cfg, size)
    net = network.init_params(hp, seed=cfg["run"]["seed"])
    V_tr, W_tr = ds.arrays(SPLIT_TRAIN)
    V_va, W_va = ds.arrays(SPLIT_VALIDATION)
    net, hist = network.train(net, V_tr, W_tr, V_va, W_va, hp.lambda_l1,
                              hp.lambda_l2, max_iter=c["max_iter"],
                              gtol=c["gtol"], ftol=c["ftol"], memory=c["memory"])
    network.save_net(net, os.path.join(out, "net.json"))
    hist.to_csv(os.path.join(out, "history.csv"))
    metrics = {"train_size": size,
               "train_rmse_db": rmse_db(network.forward_batch(net, V_tr), W_tr)}
    if len(V_va):
        metrics["validation_rmse_db"] = rmse_db(network.forward_batch(net, V_va), W_va)
    test = _load_test(cfg)
    if test is not None:
        metrics["test_rmse_db"] = rmse_db(
            network.forward_batch(net, test.voltages), test.weights_db)
    _write_metrics(out, metrics)
    _write_meta(out, "train-nn", cfg)
    _print_metrics(metrics)
    return EXIT_OK


def _cmd_train_tl(args, cfg):
    out = _out_dir(args, cfg)
    ds = _maybe_subset(_load_train(cfg), cfg["tl"]["subset_size"],
                       cfg["run"]["seed"])
    c = cfg["tl"]
    hp = network.Hyperparams(c["n1"], c["n2"], c["lambda_l1"], c["lambda_l2"])
    res = train_tl_nn(ds, mesh.default_topology(), hp,
                      experiments.tl_config_from(cfg, seed=cfg["run"]["seed"]),
                      out_dir=out, dump_synth=c["dump_synth"])
    metrics = dict(res.metrics)
    test = _load_test(cfg)
    if test is not None:
        metrics["test_rmse_db"] = rmse_db(
            network.forward_batch(res.net, test.voltages), test.weights_db)
    _write_metrics(out, metrics)
    _write_meta(out, "train-tl", cfg)
    _print_metrics(metrics)
    return EXIT_OK


def _full_dataset(cfg):
    train = _load_train(cfg)
    test = _load_test(cfg, required=True)
    return concat([train, test])


def _cmd_experiment_scarcity(args, cfg):
    out = _out_dir(args, cfg)
    ds = _full_dataset(cfg)
    report = experiments.run_scarcity(
        ds, mesh.default_topology(), cfg, jobs=args.jobs, out_dir=out,
        progress=_progress if args.verbose else None)
    _write_meta(out, "experiment-scarcity", cfg)
    for family, size, pcts in report.summary:
        print(f"{family} ({size}): median {pcts['p50']:.4f} dB "
              f"[p25 {pcts['p25']:.4f}, p75 {pcts['p75']:.4f}]")
    if report.failures:
        print(f"{len(report.failures)} cell(s) failed", file=sys.stderr)
    return EXIT_OK


def _progress(*parts):
    print(" ".join(str(p) for p in parts), file=sys.stderr)


def _cmd_experiment_ensemble(args, cfg):
    out = _out_dir(args, cfg)
    ds = _full_dataset(cfg)
    c = cfg["ensemble"]
    hp = network.Hyperparams(c["n1"], c["n2"], c["lambda_l1"], c["lambda_l2"])
    report = ensemble.run_ensemble_study(
        ds, sizes=c["sizes"], k_max=c["k_max"], runs=c["runs"], hp=hp,
        max_iter=c["max_iter"], seed=cfg["run"]["seed"],
        per_output=c["per_output"], out_dir=out)
    _write_meta(out, "experiment-ensemble", cfg)
    for size in c["sizes"]:
        for combiner in ensemble.COMBINERS:
            med = report.medians(size, combiner)
            first, last = min(med), max(med)
            print(f"{combiner} ({size}): K={first} median {med[first]:.4f} dB "
                  f"-> K={last} median {med[last]:.4f} dB")
    if report.n_failures:
        print(f"{report.n_failures} member training(s) failed", file=sys.stderr)
    return EXIT_OK


def _cmd_eval(args, cfg):
    with open(args.model) as fh:
        try:
            kind = json.load(fh).get("format")
        except json.JSONDecodeError:
            raise DataError(f"{args.model}: not a model file") from None
    data = load_csv(args.data)
    V, W = data.voltages, data.weights_db
    if kind == chipmod.AM_FORMAT:
        pred = eval_weights(chipmod.load_am(args.model), mesh.default_topology(), V)
    elif kind == network.NET_FORMAT:
        pred = network.forward_batch(network.load_net(args.model), V)
    else:
        raise DataError(f"{args.model}: unknown model format {kind!r}")
    overall = rmse_db(pred, W)
    d = pred - W
    per_entry = np.sqrt(np.mean(d * d, axis=0)).reshape(3, 3)
    print(f"overall_rmse_db = {overall:.4f}  ({len(V)} records)")
    for i in range(3):
        print("  " + "  ".join(f"w{i + 1}{j + 1} {per_entry[i, j]:.4f}"
                               for j in range(3)))
    if args.out:
        out = _out_dir(args, cfg)
        _write_metrics(out, {
            "overall_rmse_db": overall, "n_records": len(V),
            **{f"w{i + 1}{j + 1}_rmse_db": float(per_entry[i, j])
               for i in range(3) for j in range(3)}})
        _write_meta(out, "eval", cfg)
    return EXIT_OK


COMMANDS = {
    "chip-new": _cmd_chip_new,
    "dataset-gen": _cmd_dataset_gen,
    "fit-am": _cmd_fit_am,
    "train-nn": _cmd_train_nn,
    "train-tl": _cmd_train_tl,
    "experiment-scarcity": _cmd_experiment_scarcity,
    "experiment-ensemble": _cmd_experiment_ensemble,
    "eval": _cmd_eval,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mzimodel",
        description="Model an MZI mesh's voltage-to-weight map: physics fit, "
                    "neural surrogate, transfer learning, ensembles.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="TOML config path")
        p.add_argument("--seed", type=int, default=None, help="override run seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--force", action="store_true",
                       help="allow overwriting existing artifacts")
        p.add_argument("--jobs", type=int, default=1,
                       help="worker processes for experiment grids")
        p.add_argument("--verbose", action="store_true")
        if name == "eval":
            p.add_argument("--model", required=True, help="am.json or net.json")
            p.add_argument("--data", required=True, help="dataset CSV")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["run"]["seed"] = args.seed
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        return COMMANDS[args.command](args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, ArithmeticError) as e:
        print(f"training error: {e}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
