"""Feedforward surrogate network: 9 -> N1 -> N2 -> 9, tanh hidden layers.

Parameters live in one flat vector so the optimizer, the freeze mask, and the
regularizers all see the same indexing. Inputs are affinely mapped from
[0, V_max] to [-1, 1]; outputs are raw dB weights. The training cost is

    sqrt( sum of squared dB errors / (9 L) )  +  l1 * sum |beta|  +  l2 * sum beta^2

with the regularizers running over every parameter, frozen or not; frozen
parameters simply get zero gradient and never move.
"""

import json
import math

import numpy as np
from dataclasses import dataclass, field, replace

from . import mesh
from ._kernels import mlp as _mlp
from .errors import DataError, SchemaError, TrainingError
from .optimize import Objective, minimize

NET_FORMAT = "mzimodel-net"
NET_VERSION = 1


@dataclass(frozen=True)
class Hyperparams:
    n1: int
    n2: int
    lambda_l1: float = 0.0
    lambda_l2: float = 0.0

    def __post_init__(self):
        if self.n1 < 1 or self.n2 < 1:
            raise DataError("hidden sizes must be >= 1")
        if self.lambda_l1 < 0.0 or self.lambda_l2 < 0.0:
            raise DataError("regularizer weights must be >= 0")


def n_params(n1, n2, n_in=9, n_out=9):
    return n_in * n1 + n1 + n1 * n2 + n2 + n2 * n_out + n_out


def _frozen(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SurrogateNet:
    n1: int
    n2: int
    theta: np.ndarray
    freeze_mask: np.ndarray
    v_max: float = mesh.V_MAX
    n_in: int = 9
    n_out: int = 9

    def __post_init__(self):
        P = n_params(self.n1, self.n2, self.n_in, self.n_out)
        th = np.array(self.theta, dtype=float)
        fm = np.array(self.freeze_mask, dtype=bool)
        if th.shape != (P,):
            raise DataError(f"theta must have length {P}, got {th.shape}")
        if fm.shape != (P,):
            raise DataError(f"freeze_mask must have length {P}, got {fm.shape}")
        if not np.all(np.isfinite(th)):
            raise DataError("theta contains non-finite entries")
        object.__setattr__(self, "theta", _frozen(th))
        object.__setattr__(self, "freeze_mask", _frozen(fm))

    @property
    def n_theta(self):
        return self.theta.size

    def layout(self):
        """Index ranges of [W1, b1, W2, b2, W3, b3] inside theta."""
        sizes = [self.n_in * self.n1, self.n1, self.n1 * self.n2, self.n2,
                 self.n2 * self.n_out, self.n_out]
        edges = np.cumsum([0] + sizes)
        return [(int(edges[i]), int(edges[i + 1])) for i in range(6)]

    def weights(self, theta=None):
        th = self.theta if theta is None else theta
        (a1, a2), (b1_, b2_), (c1, c2), (d1, d2), (e1, e2), (f1, f2) = self.layout()
        return (th[a1:a2].reshape(self.n_in, self.n1), th[b1_:b2_],
                th[c1:c2].reshape(self.n1, self.n2), th[d1:d2],
                th[e1:e2].reshape(self.n2, self.n_out), th[f1:f2])

    def with_theta(self, theta):
        return replace(self, theta=theta)


def layer_slices(net):
    """Per-layer (weight_range, bias_range) pairs, input side first."""
    lo = net.layout()
    return [(lo[0], lo[1]), (lo[2], lo[3]), (lo[4], lo[5])]


def init_params(hp, seed=0, v_max=mesh.V_MAX):
    """Fresh net: per-layer symmetric uniform weights at the 1/sqrt(fan_in)
    scale, zero biases. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    parts = []
    for fan_in, fan_out in ((9, hp.n1), (hp.n1, hp.n2), (hp.n2, 9)):
        bound = 1.0 / math.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    theta = np.concatenate(parts)
    return SurrogateNet(n1=hp.n1, n2=hp.n2, theta=theta,
                        freeze_mask=np.zeros(theta.size, dtype=bool), v_max=v_max)


def _normalize(net, voltages):
    V = np.ascontiguousarray(voltages, dtype=float)
    if V.ndim != 2 or V.shape[1] != net.n_in:
        raise DataError(f"voltages must be (L, {net.n_in})")
    return V * (2.0 / net.v_max) - 1.0


def forward_batch(net, voltages, theta=None):
    """(L, 9) voltages -> (L, 9) dB predictions, row-major weight order."""
    X = _normalize(net, voltages)
    return _mlp.forward(X, *(np.ascontiguousarray(w) for w in net.weights(theta)))


def forward(net, v):
    """Single voltage vector -> (3, 3) dB weight matrix."""
    v = mesh.as_voltages(v, n_mzi=net.n_in)
    return forward_batch(net, v[None, :]).reshape(3, 3)


def cost(net, voltages, weights_db, lambda_l1=0.0, lambda_l2=0.0, theta=None):
    """Training cost and its gradient at ``theta`` (default: the net's own).

    Frozen entries of the gradient are zeroed; the regularizer values still
    include them.
    """
    th = net.theta if theta is None else np.asarray(theta, dtype=float)
    T = np.ascontiguousarray(weights_db, dtype=float)
    if T.ndim == 3:
        T = T.reshape(T.shape[0], -1)
    if not np.all(np.isfinite(T)):
        raise DataError("target weights contain non-finite values")
    X = _normalize(net, voltages)
    L = X.shape[0]
    if L == 0:
        raise DataError("empty split")
    if T.shape != (L, net.n_out):
        raise DataError(f"targets must be (L, {net.n_out})")
    ws = [np.ascontiguousarray(w) for w in net.weights(th)]
    ss, *grads = _mlp.fit_ss_grad(X, T, *ws)
    denom = net.n_out * L
    rmse = math.sqrt(ss / denom)
    g = np.concatenate([a.ravel() for a in grads]) / (2.0 * max(rmse, 1e-300) * denom)
    value = rmse
    if lambda_l1 != 0.0:
        value += lambda_l1 * float(np.sum(np.abs(th)))
        g = g + lambda_l1 * np.sign(th)
    if lambda_l2 != 0.0:
        value += lambda_l2 * float(th @ th)
        g = g + 2.0 * lambda_l2 * th
    g[net.freeze_mask] = 0.0
    return value, g


@dataclass
class TrainHistory:
    # rows: iteration, train cost, validation rmse (nan when no validation)
    rows: np.ndarray
    best_iteration: int
    best_validation_rmse: float

    def to_csv(self, path):
        np.savetxt(path, self.rows, fmt=["%d", "%.17g", "%.17g"], delimiter=",",
                   header="iteration,train_cost,validation_rmse", comments="")


def train(net, train_v, train_w, val_v=None, val_w=None, lambda_l1=0.0,
          lambda_l2=0.0, max_iter=400, gtol=1e-9, ftol=1e-14, memory=10):
    """Minimize the cost on the train split; keep the iterate with the best
    validation RMSE (falling back to the final iterate without validation)."""
    train_w = np.asarray(train_w, dtype=float)
    if train_w.ndim == 3:
        train_w = train_w.reshape(train_w.shape[0], -1)
    have_val = val_v is not None and len(val_v) > 0
    if have_val:
        val_w = np.asarray(val_w, dtype=float)
        if val_w.ndim == 3:
            val_w = val_w.reshape(val_w.shape[0], -1)

    def fun_grad(theta):
        return cost(net, train_v, train_w, lambda_l1, lambda_l2, theta=theta)

    state = {"best_rmse": math.inf, "best_theta": None, "best_iter": 0, "val": []}

    def on_iter(it, x, f, gnorm):
        if have_val:
            r = _val_rmse(net, x, val_v, val_w)
            state["val"].append(r)
            if r < state["best_rmse"]:
                state["best_rmse"] = r
                state["best_theta"] = x.copy()
                state["best_iter"] = it
        else:
            state["val"].append(math.nan)

    obj = Objective(fun_grad=fun_grad, dim=net.n_theta, max_iter=max_iter,
                    gtol=gtol, ftol=ftol)
    res = minimize(obj, net.theta, memory=memory, freeze_mask=net.freeze_mask,
                   callback=on_iter)

    if have_val and state["best_theta"] is not None:
        theta = state["best_theta"]
        best_it = state["best_iter"]
        best_rmse = state["best_rmse"]
    else:
        theta = res.x
        best_it = res.n_iter
        best_rmse = _val_rmse(net, theta, val_v, val_w) if have_val else math.nan
    theta = theta.copy()
    theta[net.freeze_mask] = net.theta[net.freeze_mask]  # bit-exact restore

    rows = np.column_stack([
        res.trace[:, 0],
        res.trace[:, 1],
        np.concatenate([[math.nan], state["val"]])[:res.trace.shape[0]],
    ])
    hist = TrainHistory(rows=rows, best_iteration=best_it,
                        best_validation_rmse=best_rmse)
    return net.with_theta(theta), hist


def _val_rmse(net, theta, val_v, val_w):
    pred = forward_batch(net, val_v, theta=theta)
    d = pred - val_w
    return float(np.sqrt(np.mean(d * d)))


# ---------------------------------------------------------------------------
# strict versioned JSON round trip

def serialize(net):
    return {
        "format": NET_FORMAT,
        "version": NET_VERSION,
        "n1": net.n1,
        "n2": net.n2,
        "n_in": net.n_in,
        "n_out": net.n_out,
        "v_max": net.v_max,
        "theta": net.theta.tolist(),
        "freeze_mask": net.freeze_mask.astype(int).tolist(),
    }


def deserialize(doc, location="<net>"):
    if not isinstance(doc, dict) or doc.get("format") != NET_FORMAT:
        raise SchemaError("not a network document", location=location)
    if doc.get("version") != NET_VERSION:
        raise SchemaError(f"unsupported version {doc.get('version')}",
                          location=location)
    required = ("n1", "n2", "n_in", "n_out", "v_max", "theta", "freeze_mask")
    missing = [k for k in required if k not in doc]
    if missing:
        raise SchemaError(f"missing fields: {missing} (no defaults are assumed)",
                          location=location)
    try:
        net = SurrogateNet(n1=int(doc["n1"]), n2=int(doc["n2"]),
                           theta=np.array(doc["theta"], dtype=float),
                           freeze_mask=np.array(doc["freeze_mask"], dtype=bool),
                           v_max=float(doc["v_max"]), n_in=int(doc["n_in"]),
                           n_out=int(doc["n_out"]))
    except (DataError, ValueError, TypeError) as e:
        raise SchemaError(str(e), location=location) from None
    return net


def save_net(net, path):
    with open(path, "w") as fh:
        json.dump(serialize(net), fh)
        fh.write("\n")


def load_net(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise SchemaError(f"not valid JSON: {e}", location=str(path)) from None
    return deserialize(doc, location=str(path))
