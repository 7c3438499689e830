"""Analytical forward model of a thermo-optic MZI mesh.

Each matrix weight W[i, j] is the power transmission from input j to output i,
modeled as an optical loss times the product of the transfer factors of the
MZIs on that path:

    W[i, j] = alpha[i, j] * prod_m 1/4 * |(sqrt(ER)-1)/(sqrt(ER)+1)
                                          +/- exp(1j * phase_m)|^2
    phase_m = phi0[m] + sum_n phi2[m, n] * V[n]^2

The +/- selects the MZI output port feeding the path (fixed per path element
at construction, cross port by default). phi2's diagonal is the self heating
of each phase shifter, the off-diagonal entries are thermal crosstalk from
the other heaters. Weights are reported in dB and clipped at a floor well
below anything measurable so downstream costs never see -inf.

All types are immutable after construction; evaluation and gradients are pure
functions, safe to call concurrently.
"""

import math
from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np

from ._kernels import am as _am
from .errors import ClipFloorError

N_INPUTS = 3
N_OUTPUTS = 3
N_MZI = 9
V_MAX = 2.0

# Linear weights below 1e-9 (-90 dB) clip to the floor: far under any
# realistic measurement, but keeps dB costs finite.
DB_FLOOR = -90.0

DB_PER_LN = 10.0 / math.log(10.0)


def db_from_linear(x, floor_db=DB_FLOOR, return_clipped=False):
    """Convert linear power ratios to dB, clipping at ``floor_db``.

    Nonpositive inputs clip to the floor. With ``return_clipped`` the flags
    marking clipped entries are returned alongside.
    """
    x = np.asarray(x, dtype=float)
    floor_lin = 10.0 ** (floor_db / 10.0)
    clipped = ~(x > floor_lin)
    with np.errstate(divide="ignore", invalid="ignore"):
        db = np.where(clipped, floor_db, 10.0 * np.log10(np.where(clipped, 1.0, x)))
    if db.ndim == 0:
        db = float(db)
        clipped = bool(clipped)
    if return_clipped:
        return db, clipped
    return db


def linear_from_db(db):
    """Inverse of :func:`db_from_linear` away from the clip floor."""
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def as_voltages(v, n_mzi=N_MZI, v_max=V_MAX, check_range=False):
    """Validate and return a heater voltage vector as float64.

    Shape and finiteness are always enforced; the [0, v_max] range check is
    opt-in because the forward model itself is defined for any real voltage
    (only V^2 enters).
    """
    v = np.asarray(v, dtype=float)
    if v.shape != (n_mzi,):
        raise ValueError(f"voltage vector must have shape ({n_mzi},), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("voltage vector contains non-finite entries")
    if check_range and (np.any(v < 0.0) or np.any(v > v_max)):
        raise ValueError(f"voltages must lie in [0, {v_max}] V")
    return v


def check_weights_db(w, n_outputs=N_OUTPUTS, n_inputs=N_INPUTS, margin_db=0.5):
    """Validate a dB weight matrix: finite, and no entry above 0 dB + margin.

    A passive mesh cannot exceed unity transmission; the margin absorbs
    measurement noise.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (n_outputs, n_inputs):
        raise ValueError(
            f"weight matrix must have shape ({n_outputs}, {n_inputs}), got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weight matrix contains non-finite entries")
    if np.any(w > margin_db):
        raise ValueError(f"weight above 0 dB + {margin_db} dB margin: max {w.max():.3f}")
    return w


@dataclass(frozen=True)
class MeshTopology:
    """Which MZIs sit on each input->output path, and with which port sign.

    ``paths`` maps (output i, input j), both 1-based, to an ordered tuple of
    1-based MZI indices. ``port_sign`` maps (i, j, m) to +1 (bar port) or -1
    (cross port). Both are frozen at construction.
    """

    n_inputs: int
    n_outputs: int
    n_mzi: int
    paths: dict
    port_sign: dict

    def __post_init__(self):
        paths = {}
        signs = {}
        for i in range(1, self.n_outputs + 1):
            for j in range(1, self.n_inputs + 1):
                if (i, j) not in self.paths:
                    raise ValueError(f"missing path for output {i}, input {j}")
                path = tuple(int(m) for m in self.paths[(i, j)])
                if not path:
                    raise ValueError(f"empty path for output {i}, input {j}")
                for m in path:
                    if not 1 <= m <= self.n_mzi:
                        raise ValueError(f"MZI index {m} outside [1, {self.n_mzi}]")
                    s = self.port_sign.get((i, j, m))
                    if s not in (+1, -1):
                        raise ValueError(f"port_sign missing or invalid for {(i, j, m)}")
                    signs[(i, j, m)] = int(s)
                paths[(i, j)] = path
        object.__setattr__(self, "paths", MappingProxyType(paths))
        object.__setattr__(self, "port_sign", MappingProxyType(signs))
        # CSR layout for the kernels: weight k = (i-1)*n_inputs + (j-1),
        # MZI indices 0-based.
        ptr = [0]
        mzis = []
        sgns = []
        for i in range(1, self.n_outputs + 1):
            for j in range(1, self.n_inputs + 1):
                for m in paths[(i, j)]:
                    mzis.append(m - 1)
                    sgns.append(float(signs[(i, j, m)]))
                ptr.append(len(mzis))
        object.__setattr__(self, "_path_ptr", _frozen(np.array(ptr, dtype=np.int64)))
        object.__setattr__(self, "_path_mzi", _frozen(np.array(mzis, dtype=np.int64)))
        object.__setattr__(self, "_path_sign", _frozen(np.array(sgns, dtype=float)))

    @property
    def n_weights(self):
        return self.n_outputs * self.n_inputs

    def csr(self):
        """(path_ptr, path_mzi, path_sign) arrays in kernel layout."""
        return self._path_ptr, self._path_mzi, self._path_sign

    def __reduce__(self):
        # mappingproxy fields do not pickle; rebuild from plain dicts
        return (MeshTopology, (self.n_inputs, self.n_outputs, self.n_mzi,
                               dict(self.paths), dict(self.port_sign)))


def default_topology():
    """Canonical 3x3 crossbar: one dedicated MZI per weight, cross port.

    MZI for weight (i, j) is 3*(i-1)+j; splitting/combining losses are
    absorbed into alpha.
    """
    paths = {}
    signs = {}
    for i in range(1, N_OUTPUTS + 1):
        for j in range(1, N_INPUTS + 1):
            m = N_INPUTS * (i - 1) + j
            paths[(i, j)] = (m,)
            signs[(i, j, m)] = -1
    return MeshTopology(n_inputs=N_INPUTS, n_outputs=N_OUTPUTS, n_mzi=N_MZI,
                        paths=paths, port_sign=signs)


def _frozen(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class AnalyticalModelParams:
    """Trainable physics parameters of the forward model.

    alpha: (n_outputs, n_inputs) optical loss per weight, linear scale (0, 1].
    er: extinction ratio, linear, strictly > 1.
    phi0: (n_mzi,) static phases, rad.
    phi2: (n_mzi, n_mzi) phase response to squared voltage, rad/V^2;
          diagonal = self heating, off-diagonal = thermal crosstalk.
    """

    alpha: np.ndarray
    er: float
    phi0: np.ndarray
    phi2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "alpha", _frozen(np.array(self.alpha, dtype=float)))
        object.__setattr__(self, "er", float(self.er))
        object.__setattr__(self, "phi0", _frozen(np.array(self.phi0, dtype=float)))
        object.__setattr__(self, "phi2", _frozen(np.array(self.phi2, dtype=float)))
        self.validate()

    def validate(self):
        if self.alpha.ndim != 2:
            raise ValueError("alpha must be a 2-D array")
        n_mzi = self.phi0.shape[0]
        if self.phi0.shape != (n_mzi,) or self.phi2.shape != (n_mzi, n_mzi):
            raise ValueError("phi0/phi2 shapes inconsistent")
        if not np.all(np.isfinite(self.alpha)) or np.any(self.alpha <= 0.0):
            raise ValueError("alpha entries must be finite and strictly positive")
        if not math.isfinite(self.er) or self.er <= 1.0:
            raise ValueError(f"extinction ratio must be finite and > 1, got {self.er}")
        if not (np.all(np.isfinite(self.phi0)) and np.all(np.isfinite(self.phi2))):
            raise ValueError("phi0/phi2 must be finite")

    @property
    def n_mzi(self):
        return self.phi0.shape[0]


def _check_shapes(params, topo):
    if params.alpha.shape != (topo.n_outputs, topo.n_inputs):
        raise ValueError("alpha shape does not match topology")
    if params.n_mzi != topo.n_mzi:
        raise ValueError("phase parameter count does not match topology")


def eval_am_batch(params, topo, voltages, extra_phase=None, floor_db=DB_FLOOR,
                  return_clipped=False):
    """Evaluate the forward model for a batch of voltage vectors.

    voltages: (L, n_mzi). Optional extra_phase (L, n_mzi) is added to each
    MZI phase (used by the virtual chip to inject physics outside this
    model's span). Returns (L, n_outputs, n_inputs) dB weights, plus the clip
    flags when requested.
    """
    _check_shapes(params, topo)
    V = np.ascontiguousarray(voltages, dtype=float)
    if V.ndim != 2 or V.shape[1] != topo.n_mzi:
        raise ValueError(f"voltages must have shape (L, {topo.n_mzi})")
    if not np.all(np.isfinite(V)):
        raise ValueError("voltages contain non-finite entries")
    if extra_phase is None:
        extra_phase = np.zeros_like(V)
    else:
        extra_phase = np.ascontiguousarray(extra_phase, dtype=float)
        if extra_phase.shape != V.shape:
            raise ValueError("extra_phase shape must match voltages")
    ptr, mzi, sign = topo.csr()
    w_db, clipped = _am.weights_db(
        V * V, params.alpha.reshape(-1), params.er, params.phi0, params.phi2,
        ptr, mzi, sign, extra_phase, floor_db)
    if not np.all(np.isfinite(w_db)):
        raise FloatingPointError("non-finite weight produced by analytical model")
    shape = (V.shape[0], topo.n_outputs, topo.n_inputs)
    if return_clipped:
        return w_db.reshape(shape), clipped.reshape(shape)
    return w_db.reshape(shape)


def eval_am(params, topo, v, floor_db=DB_FLOOR):
    """Forward model for a single voltage vector -> (n_outputs, n_inputs) dB."""
    v = as_voltages(v, n_mzi=topo.n_mzi)
    return eval_am_batch(params, topo, v[None, :], floor_db=floor_db)[0]


@dataclass(frozen=True)
class AmGradients:
    """Partial derivatives of every dB weight w.r.t. every model parameter.

    Weights are flattened row-major over (output, input) into index k.
    d_alpha[k]: (n_outputs, n_inputs); d_er[k]: scalar; d_phi0[k]: (n_mzi,);
    d_phi2[k]: (n_mzi, n_mzi).
    """

    d_alpha: np.ndarray
    d_er: np.ndarray
    d_phi0: np.ndarray
    d_phi2: np.ndarray

    def jacobian(self):
        """Flatten to (n_weights, P) with columns [alpha.ravel, er, phi0, phi2.ravel]."""
        k = self.d_er.shape[0]
        return np.hstack([
            self.d_alpha.reshape(k, -1),
            self.d_er.reshape(k, 1),
            self.d_phi0,
            self.d_phi2.reshape(k, -1),
        ])


def grad_am(params, topo, v, floor_db=DB_FLOOR):
    """Analytic Jacobian of the dB weights at one voltage point.

    Raises :class:`ClipFloorError` when any weight sits on the clip floor,
    where the dB gradient is undefined.
    """
    _check_shapes(params, topo)
    v = as_voltages(v, n_mzi=topo.n_mzi)
    w_db, clipped = eval_am_batch(params, topo, v[None, :], floor_db=floor_db,
                                  return_clipped=True)
    if clipped.any():
        raise ClipFloorError("gradient undefined: weight(s) at the dB clip floor")

    v2 = v * v
    phase = params.phi0 + params.phi2 @ v2
    sqrt_er = math.sqrt(params.er)
    r = (sqrt_er - 1.0) / (sqrt_er + 1.0)
    dr_der = 1.0 / (sqrt_er * (sqrt_er + 1.0) ** 2)

    n_w = topo.n_weights
    n_mzi = topo.n_mzi
    d_alpha = np.zeros((n_w, topo.n_outputs, topo.n_inputs))
    d_er = np.zeros(n_w)
    d_phi0 = np.zeros((n_w, n_mzi))
    d_phi2 = np.zeros((n_w, n_mzi, n_mzi))

    k = 0
    for i in range(topo.n_outputs):
        for j in range(topo.n_inputs):
            d_alpha[k, i, j] = DB_PER_LN / params.alpha[i, j]
            for m1 in topo.paths[(i + 1, j + 1)]:
                m = m1 - 1
                s = topo.port_sign[(i + 1, j + 1, m1)]
                f = 0.25 * (r * r + 1.0 + 2.0 * s * r * math.cos(phase[m]))
                dln_dphi = (-0.5 * s * r * math.sin(phase[m])) / f
                d_phi0[k, m] += DB_PER_LN * dln_dphi
                d_phi2[k, m, :] += DB_PER_LN * dln_dphi * v2
                d_er[k] += DB_PER_LN * 0.5 * (r + s * math.cos(phase[m])) / f * dr_der
            k += 1
    return AmGradients(d_alpha=d_alpha, d_er=d_er, d_phi0=d_phi0, d_phi2=d_phi2)
