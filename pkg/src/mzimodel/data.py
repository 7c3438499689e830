"""Dataset container, split tagging, and the CSV interchange format.

A dataset is a flat table of (voltage vector, dB weight matrix) records with
one split tag per record. Weights are stored row-major as 9 columns w11..w33.
Sweep-protocol records, when present, occupy the first ``n_sweep`` rows; that
ordering is what lets subsetting keep the sweep block intact.
"""

import csv

import numpy as np
from dataclasses import dataclass, replace

from .errors import DataError, SchemaError

SPLIT_TRAIN = "train"
SPLIT_VALIDATION = "validation"
SPLIT_TEST = "test"
SPLITS = (SPLIT_TRAIN, SPLIT_VALIDATION, SPLIT_TEST)

PROV_EXPERIMENTAL = "experimental_sim"
PROV_SYNTHETIC = "synthetic"

_N_V = 9
_N_W = 9

CSV_HEADER = ([f"v{n}" for n in range(1, _N_V + 1)]
              + [f"w{i}{j}" for i in range(1, 4) for j in range(1, 4)]
              + ["split", "provenance"])


def _frozen(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Dataset:
    """Immutable record table. voltages (L, 9) V; weights_db (L, 9) dB."""

    voltages: np.ndarray
    weights_db: np.ndarray
    split: np.ndarray
    provenance: str
    n_sweep: int = 0

    def __post_init__(self):
        v = np.array(self.voltages, dtype=float)
        w = np.array(self.weights_db, dtype=float)
        s = np.array(self.split, dtype="U10")
        if v.ndim != 2 or v.shape[1] != _N_V:
            raise DataError(f"voltages must be (L, {_N_V}), got {v.shape}")
        if w.shape != (v.shape[0], _N_W):
            raise DataError(f"weights_db must be (L, {_N_W}), got {w.shape}")
        if s.shape != (v.shape[0],):
            raise DataError("split tags must be one per record")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(w))):
            raise DataError("dataset contains non-finite values")
        bad = set(np.unique(s)) - set(SPLITS)
        if bad:
            raise DataError(f"unknown split tags: {sorted(bad)}")
        if self.provenance not in (PROV_EXPERIMENTAL, PROV_SYNTHETIC):
            raise DataError(f"unknown provenance {self.provenance!r}")
        if not 0 <= self.n_sweep <= v.shape[0]:
            raise DataError("n_sweep out of range")
        object.__setattr__(self, "voltages", _frozen(v))
        object.__setattr__(self, "weights_db", _frozen(w))
        object.__setattr__(self, "split", _frozen(s))

    def __len__(self):
        return self.voltages.shape[0]

    def mask(self, tag):
        if tag not in SPLITS:
            raise DataError(f"unknown split tag {tag!r}")
        return self.split == tag

    def count(self, tag):
        return int(np.count_nonzero(self.mask(tag)))

    def arrays(self, tag):
        """(voltages, weights_db) of the records carrying ``tag``."""
        m = self.mask(tag)
        return self.voltages[m], self.weights_db[m]

    def subset(self, indices):
        """Dataset restricted to ``indices`` (kept in ascending order).

        Because sweep records lead the table, sorting preserves the
        sweep-block-first layout and n_sweep stays meaningful.
        """
        idx = np.unique(np.asarray(indices, dtype=np.int64))
        if idx.size == 0:
            raise DataError("empty subset")
        if idx[0] < 0 or idx[-1] >= len(self):
            raise DataError("subset index out of range")
        return Dataset(self.voltages[idx], self.weights_db[idx], self.split[idx],
                       self.provenance, n_sweep=int(np.sum(idx < self.n_sweep)))

    def retag(self, split):
        return replace(self, split=split)

    def where(self, *tags):
        """Sub-dataset of the records carrying any of ``tags``."""
        keep = np.zeros(len(self), dtype=bool)
        for t in tags:
            keep |= self.mask(t)
        return self.subset(np.nonzero(keep)[0])


def concat(datasets):
    """Stack datasets in order. Only the first may carry sweep records."""
    if not datasets:
        raise DataError("nothing to concatenate")
    prov = datasets[0].provenance
    for d in datasets[1:]:
        if d.provenance != prov:
            raise DataError("provenance mismatch in concat")
        if d.n_sweep:
            raise DataError("sweep records must come from the first dataset only")
    return Dataset(np.vstack([d.voltages for d in datasets]),
                   np.vstack([d.weights_db for d in datasets]),
                   np.concatenate([d.split for d in datasets]),
                   prov, n_sweep=datasets[0].n_sweep)


def split(dataset, train_n, validation_n, keep_sweep_in_train=True, seed=0):
    """Re-tag records as train/validation/test.

    Sweep records are forced into train when ``keep_sweep_in_train``; the
    remaining assignments are sampled without replacement. Records beyond
    train_n + validation_n become test.
    """
    L = len(dataset)
    if train_n + validation_n > L:
        raise DataError(f"cannot split {L} records into {train_n}+{validation_n}")
    forced = dataset.n_sweep if keep_sweep_in_train else 0
    if train_n < forced:
        raise DataError(f"train_n={train_n} smaller than the {forced} sweep records")
    rng = np.random.default_rng(seed)
    pool = rng.permutation(np.arange(forced, L))
    tags = np.empty(L, dtype="U10")
    tags[:forced] = SPLIT_TRAIN
    tags[pool[:train_n - forced]] = SPLIT_TRAIN
    tags[pool[train_n - forced:train_n - forced + validation_n]] = SPLIT_VALIDATION
    tags[pool[train_n - forced + validation_n:]] = SPLIT_TEST
    return dataset.retag(tags)


def sample_training_subset(dataset, size, rng):
    """Indices of a training subset of ``size``: every sweep record plus a
    without-replacement draw from the remaining train-tagged records."""
    train_idx = np.flatnonzero(dataset.mask(SPLIT_TRAIN))
    sweep = train_idx[train_idx < dataset.n_sweep]
    pool = train_idx[train_idx >= dataset.n_sweep]
    if size < len(sweep) or size - len(sweep) > len(pool):
        raise DataError(f"cannot sample training subset of size {size}")
    extra = rng.choice(pool, size - len(sweep), replace=False)
    return np.concatenate([sweep, extra])


def rmse_db(pred, target):
    """Root-mean-square error over all dB entries of two equal-shape arrays."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise DataError(f"shape mismatch {pred.shape} vs {target.shape}")
    d = pred - target
    return float(np.sqrt(np.mean(d * d)))


def save_csv(dataset, path):
    """Write the interchange CSV: v1..v9, w11..w33 (6 decimals), split, provenance."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for l in range(len(dataset)):
            row = [f"{x:.6f}" for x in dataset.voltages[l]]
            row += [f"{x:.6f}" for x in dataset.weights_db[l]]
            row += [str(dataset.split[l]), dataset.provenance]
            w.writerow(row)


def load_csv(path, n_sweep=0):
    """Read a dataset CSV back; ``n_sweep`` restores the sweep-block size."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty file", location=f"{path}:1") from None
        if header != CSV_HEADER:
            raise SchemaError(f"bad header {header[:3]}...", location=f"{path}:1")
        volts, weights, tags, provs = [], [], [], []
        for ln, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise SchemaError(f"expected {len(CSV_HEADER)} fields, got {len(row)}",
                                  location=f"{path}:{ln}")
            try:
                volts.append([float(x) for x in row[:_N_V]])
                weights.append([float(x) for x in row[_N_V:_N_V + _N_W]])
            except ValueError as e:
                raise SchemaError(str(e), location=f"{path}:{ln}") from None
            tags.append(row[-2])
            provs.append(row[-1])
    if not volts:
        raise DataError(f"no records in {path}")
    prov = provs[0]
    if any(p != prov for p in provs):
        raise DataError(f"mixed provenance in {path}")
    return Dataset(np.array(volts), np.array(weights), np.array(tags), prov,
                   n_sweep=n_sweep)
