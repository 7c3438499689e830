"""Virtual ground-truth chip and the measurement protocols.

The chip hides a set of analytical-model parameters plus two effects the
analytical model cannot express: a saturating excess-crosstalk phase term and
Gaussian dB-domain measurement noise. Models only ever see (voltage, weight)
records produced by the protocols here; the hidden parameters stay inside the
chip spec file.
"""

import json
import math

import numpy as np
from dataclasses import dataclass

from . import mesh
from .data import (PROV_EXPERIMENTAL, SPLIT_TRAIN, Dataset, concat)
from .errors import DataError, SchemaError

CHIP_FORMAT = "mzimodel-chip"
CHIP_VERSION = 1

# excess-crosstalk saturation knee, in V^2; chosen away from the small-signal
# regime so the term is not absorbable into the quadratic phase response
DEFAULT_CROSSTALK_SCALE = 2.0
DEFAULT_NOISE_SIGMA_DB = 0.05

# hidden-truth generation ranges for default_chip
_ALPHA_RANGE = (0.45, 0.75)
_ER_TRUE = 2000.0            # ~33 dB: nulls sit near -36 dB, above the -60 dB data floor
_PHI2_DIAG_RANGE = (0.74, 0.83)
_PHI2_OFFDIAG_SIGMA = 0.02
_EXCESS_SIGMA = 0.2          # rad/V^2 before saturation; sets how far AM falls short


def _frozen(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class VirtualChip:
    """Hidden physics (base params + excess crosstalk) plus a noise model."""

    params: mesh.AnalyticalModelParams
    topo: mesh.MeshTopology
    excess_crosstalk: np.ndarray
    crosstalk_scale: float = DEFAULT_CROSSTALK_SCALE
    noise_sigma_db: float = DEFAULT_NOISE_SIGMA_DB
    seed: int = 0

    def __post_init__(self):
        c = np.array(self.excess_crosstalk, dtype=float)
        if c.shape != (self.topo.n_mzi, self.topo.n_mzi):
            raise DataError("excess_crosstalk must be n_mzi x n_mzi")
        if not np.all(np.isfinite(c)):
            raise DataError("excess_crosstalk must be finite")
        if self.crosstalk_scale <= 0.0:
            raise DataError("crosstalk_scale must be positive")
        if self.noise_sigma_db < 0.0:
            raise DataError("noise_sigma_db must be >= 0")
        object.__setattr__(self, "excess_crosstalk", _frozen(c))

    def rng(self):
        return np.random.default_rng(self.seed)


def default_chip(seed=0, noise_sigma_db=DEFAULT_NOISE_SIGMA_DB,
                 excess_sigma=_EXCESS_SIGMA, er=_ER_TRUE):
    """Draw a realistic hidden truth from ``seed``.

    Pass excess_sigma=0 and noise_sigma_db=0 for the degenerate chip that an
    analytical-model fit can reproduce exactly.
    """
    topo = mesh.default_topology()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    n = topo.n_mzi
    phi2 = _PHI2_OFFDIAG_SIGMA * rng.standard_normal((n, n))
    np.fill_diagonal(phi2, rng.uniform(*_PHI2_DIAG_RANGE, n))
    params = mesh.AnalyticalModelParams(
        alpha=rng.uniform(*_ALPHA_RANGE, (topo.n_outputs, topo.n_inputs)),
        er=er,
        phi0=rng.uniform(0.0, 2.0 * math.pi, n),
        phi2=phi2,
    )
    # substrate-mediated heating is spatially correlated, so the excess term
    # is dominated by a couple of common modes rather than 81 free couplings
    u1, v1, u2, v2 = (rng.standard_normal(n) for _ in range(4))
    excess = excess_sigma * (np.outer(u1, v1) + 0.5 * np.outer(u2, v2)) / math.sqrt(n)
    return VirtualChip(params=params, topo=topo, excess_crosstalk=excess,
                       noise_sigma_db=noise_sigma_db, seed=int(seed))


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def excess_phase(chip, voltages):
    """Saturating non-AM phase term for a (L, n_mzi) voltage batch."""
    s = chip.crosstalk_scale
    drive = s * np.tanh(voltages * voltages / s)
    return drive @ chip.excess_crosstalk.T


def measure_batch(chip, voltages, rng):
    """Measure a batch: hidden physics + dB-domain noise, floor-clipped.

    Returns (L, 9) dB weights flattened row-major, ready for Dataset columns.
    """
    V = np.asarray(voltages, dtype=float)
    if V.ndim != 2 or V.shape[1] != chip.topo.n_mzi:
        raise DataError(f"voltages must be (L, {chip.topo.n_mzi})")
    if np.any(V < 0.0) or np.any(V > mesh.V_MAX):
        raise DataError(f"voltages must lie in [0, {mesh.V_MAX}] V")
    w = mesh.eval_am_batch(chip.params, chip.topo, V,
                           extra_phase=excess_phase(chip, V))
    w = w.reshape(V.shape[0], -1)
    noise = _as_rng(rng).standard_normal(w.shape) * chip.noise_sigma_db
    return np.maximum(w + noise, mesh.DB_FLOOR)


def measure(chip, v, rng):
    """Single measurement -> (3, 3) dB weight matrix."""
    try:
        v = mesh.as_voltages(v, n_mzi=chip.topo.n_mzi)
    except ValueError as e:
        raise DataError(str(e)) from None
    w = measure_batch(chip, v[None, :], rng)
    return w.reshape(chip.topo.n_outputs, chip.topo.n_inputs)


def sweep_protocol(chip, v_min=0.0, v_max=mesh.V_MAX, step=0.1, rest_level=0.0,
                   rng=None):
    """One-at-a-time heater sweep: each MZI stepped over the range while the
    others rest. 9 heaters x 21 points = 189 records at the defaults."""
    n_steps = (v_max - v_min) / step
    if abs(n_steps - round(n_steps)) > 1e-9:
        raise DataError("step must divide the sweep range")
    levels = v_min + step * np.arange(round(n_steps) + 1)
    n = chip.topo.n_mzi
    V = np.full((n * levels.size, n), float(rest_level))
    row = 0
    for m in range(n):
        for lvl in levels:
            V[row, m] = lvl
            row += 1
    rng = chip.rng() if rng is None else _as_rng(rng)
    W = measure_batch(chip, V, rng)
    return Dataset(V, W, np.full(len(V), SPLIT_TRAIN), PROV_EXPERIMENTAL,
                   n_sweep=len(V))


def random_protocol(chip, count, rng):
    """i.i.d. uniform voltages on [0, V_max]^9."""
    if count < 1:
        raise DataError("count must be >= 1")
    rng = _as_rng(rng)
    V = rng.uniform(0.0, mesh.V_MAX, (int(count), chip.topo.n_mzi))
    W = measure_batch(chip, V, rng)
    return Dataset(V, W, np.full(int(count), SPLIT_TRAIN), PROV_EXPERIMENTAL)


def acquire(chip, n_random, seed, step=0.1, rest_level=0.0):
    """Sweep followed by n_random uniform records, one reproducible stream."""
    rng = np.random.default_rng(np.random.SeedSequence([int(chip.seed), int(seed)]))
    ds_sweep = sweep_protocol(chip, step=step, rest_level=rest_level, rng=rng)
    if n_random == 0:
        return ds_sweep
    return concat([ds_sweep, random_protocol(chip, n_random, rng)])


# ---------------------------------------------------------------------------
# chip spec (de)serialization; holds hidden parameters, never shown to models

def _topo_to_doc(topo):
    return {
        "n_inputs": topo.n_inputs,
        "n_outputs": topo.n_outputs,
        "n_mzi": topo.n_mzi,
        "paths": {f"{i},{j}": list(p) for (i, j), p in topo.paths.items()},
        "port_sign": {f"{i},{j},{m}": s for (i, j, m), s in topo.port_sign.items()},
    }


def _topo_from_doc(doc):
    try:
        paths = {tuple(int(x) for x in k.split(",")): tuple(v)
                 for k, v in doc["paths"].items()}
        signs = {tuple(int(x) for x in k.split(",")): int(v)
                 for k, v in doc["port_sign"].items()}
        return mesh.MeshTopology(n_inputs=int(doc["n_inputs"]),
                                 n_outputs=int(doc["n_outputs"]),
                                 n_mzi=int(doc["n_mzi"]),
                                 paths=paths, port_sign=signs)
    except (KeyError, ValueError, TypeError) as e:
        raise SchemaError(f"bad topology section: {e}", location="topology") from None


def save_chip(chip, path):
    doc = {
        "format": CHIP_FORMAT,
        "version": CHIP_VERSION,
        "seed": chip.seed,
        "noise_sigma_db": chip.noise_sigma_db,
        "crosstalk_scale": chip.crosstalk_scale,
        "topology": _topo_to_doc(chip.topo),
        "alpha": chip.params.alpha.tolist(),
        "er": chip.params.er,
        "phi0": chip.params.phi0.tolist(),
        "phi2": chip.params.phi2.tolist(),
        "excess_crosstalk": chip.excess_crosstalk.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_chip(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaError(f"not valid JSON: {e}", location=str(path)) from None
    if doc.get("format") != CHIP_FORMAT:
        raise SchemaError("not a chip spec file", location=str(path))
    if doc.get("version") != CHIP_VERSION:
        raise SchemaError(f"unsupported chip version {doc.get('version')}",
                          location=str(path))
    required = ("seed", "noise_sigma_db", "crosstalk_scale", "topology", "alpha",
                "er", "phi0", "phi2", "excess_crosstalk")
    missing = [k for k in required if k not in doc]
    if missing:
        raise SchemaError(f"missing fields: {missing}", location=str(path))
    topo = _topo_from_doc(doc["topology"])
    try:
        params = mesh.AnalyticalModelParams(alpha=np.array(doc["alpha"], dtype=float),
                                            er=float(doc["er"]),
                                            phi0=np.array(doc["phi0"], dtype=float),
                                            phi2=np.array(doc["phi2"], dtype=float))
        return VirtualChip(params=params, topo=topo,
                           excess_crosstalk=np.array(doc["excess_crosstalk"], dtype=float),
                           crosstalk_scale=float(doc["crosstalk_scale"]),
                           noise_sigma_db=float(doc["noise_sigma_db"]),
                           seed=int(doc["seed"]))
    except (ValueError, TypeError) as e:
        raise SchemaError(str(e), location=str(path)) from None


AM_FORMAT = "mzimodel-am"
AM_VERSION = 1


def save_am(params, path):
    """Persist a fitted parameter set (the physics model, not a chip spec)."""
    doc = {
        "format": AM_FORMAT,
        "version": AM_VERSION,
        "alpha": params.alpha.tolist(),
        "er": params.er,
        "phi0": params.phi0.tolist(),
        "phi2": params.phi2.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_am(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaError(f"not valid JSON: {e}", location=str(path)) from None
    if doc.get("format") != AM_FORMAT:
        raise SchemaError("not a fitted-model file", location=str(path))
    if doc.get("version") != AM_VERSION:
        raise SchemaError(f"unsupported version {doc.get('version')}", location=str(path))
    missing = [k for k in ("alpha", "er", "phi0", "phi2") if k not in doc]
    if missing:
        raise SchemaError(f"missing fields: {missing}", location=str(path))
    try:
        return mesh.AnalyticalModelParams(alpha=np.array(doc["alpha"], dtype=float),
                                          er=float(doc["er"]),
                                          phi0=np.array(doc["phi0"], dtype=float),
                                          phi2=np.array(doc["phi2"], dtype=float))
    except (ValueError, TypeError) as e:
        raise SchemaError(str(e), location=str(path)) from None
