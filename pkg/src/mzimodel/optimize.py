"""Limited-memory quasi-Newton minimization and model fitting.

Plain two-loop L-BFGS with a strong-Wolfe line search, written against a
value-and-gradient callback. Also hosts the finite-difference gradient
checker used to guard the hand-derived gradients, and the multi-start fit of
the analytical mesh model (positivity of the loss factors and the er > 1
constraint are handled by fitting log(alpha) and a shifted softplus).
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import mesh
from ._kernels import am as _am
from .data import SPLIT_TRAIN, SPLIT_VALIDATION, rmse_db
from .errors import TrainingError

_CURV_EPS = 1e-12


@dataclass
class Objective:
    """Value-and-gradient callback plus its stopping rules.

    fun_grad(x) must return (float, ndarray of length dim). gtol is on the
    max-abs gradient entry; ftol on the relative per-step decrease.
    """

    fun_grad: Callable
    dim: int
    max_iter: int = 500
    gtol: float = 1e-9
    ftol: float = 1e-13


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    grad_norm: float
    n_iter: int
    n_eval: int
    status: str
    converged: bool
    # rows: iteration, objective, grad_norm, step
    trace: np.ndarray = field(repr=False, default=None)


def trace_to_csv(trace, path):
    header = "iteration,objective,grad_norm,step"
    np.savetxt(path, np.asarray(trace), fmt=["%d", "%.17g", "%.17g", "%.17g"],
               delimiter=",", header=header, comments="")


def _two_loop(g, s_list, y_list, rho_list, gamma):
    q = g.copy()
    alphas = []
    for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rho_list)):
        a = rho * (s @ q)
        alphas.append(a)
        q -= a * y
    q *= gamma
    for (s, y, rho), a in zip(zip(s_list, y_list, rho_list), reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return q


def _interp_quadratic(a_lo, f_lo, d_lo, a_hi, f_hi):
    # minimizer of the quadratic through (a_lo, f_lo, d_lo) and (a_hi, f_hi)
    denom = 2.0 * (f_hi - f_lo - d_lo * (a_hi - a_lo))
    if denom == 0.0 or not math.isfinite(denom):
        return 0.5 * (a_lo + a_hi)
    return a_lo - d_lo * (a_hi - a_lo) ** 2 / denom


class _LineSearch:
    """Strong-Wolfe search along x + a*p (Nocedal-Wright style bracket/zoom).

    Non-finite trial values are treated as out of range: the step shrinks
    back toward the last finite point instead of aborting the run.
    """

    def __init__(self, fg, x, p, f0, g0, c1, c2, max_evals=40):
        self.fg, self.x, self.p = fg, x, p
        self.f0 = f0
        self.d0 = float(g0 @ p)
        self.c1, self.c2 = c1, c2
        self.max_evals = max_evals
        self.n_eval = 0

    def _phi(self, a):
        f, g = self.fg(self.x + a * self.p)
        self.n_eval += 1
        if math.isfinite(f) and np.all(np.isfinite(g)):
            return f, g, float(g @ self.p)
        return None, None, None

    def run(self, a_init, a_max=1e12):
        a_prev, f_prev, d_prev = 0.0, self.f0, self.d0
        a = a_init
        first = True
        while self.n_eval < self.max_evals:
            f, g, d = self._phi(a)
            if f is None:
                a = 0.5 * (a_prev + a)  # overshoot into bad territory
                if a <= a_prev * (1 + 1e-12) + 1e-300:
                    return None
                continue
            if f > self.f0 + self.c1 * a * self.d0 or (not first and f >= f_prev):
                return self._zoom(a_prev, f_prev, d_prev, a, f)
            if abs(d) <= -self.c2 * self.d0:
                return a, f, g
            if d >= 0.0:
                return self._zoom(a, f, d, a_prev, f_prev)
            a_prev, f_prev, d_prev = a, f, d
            a = min(2.0 * a, a_max)
            first = False
        return None

    def _zoom(self, a_lo, f_lo, d_lo, a_hi, f_hi):
        while self.n_eval < self.max_evals:
            width = a_hi - a_lo
            if abs(width) <= 1e-14 * max(1.0, abs(a_lo)):
                break
            a = _interp_quadratic(a_lo, f_lo, d_lo, a_hi, f_hi)
            # keep the trial safely interior
            lo, hi = (a_lo, a_hi) if a_lo < a_hi else (a_hi, a_lo)
            margin = 0.1 * (hi - lo)
            if not (lo + margin <= a <= hi - margin):
                a = 0.5 * (a_lo + a_hi)
            f, g, d = self._phi(a)
            if f is None:
                a_hi, f_hi = a, np.inf
                continue
            if f > self.f0 + self.c1 * a * self.d0 or f >= f_lo:
                a_hi, f_hi = a, f
            else:
                if abs(d) <= -self.c2 * self.d0:
                    return a, f, g
                if d * (a_hi - a_lo) >= 0.0:
                    a_hi, f_hi = a_lo, f_lo
                a_lo, f_lo, d_lo = a, f, d
        # no point meeting the curvature condition: settle for decrease
        if f_lo < self.f0 and a_lo > 0.0:
            f, g, d = self._phi(a_lo)
            if f is not None:
                return a_lo, f, g
        return None


def minimize(obj, x0, memory=10, freeze_mask=None, c1=1e-4, c2=0.9,
             callback=None):
    """Minimize obj.fun_grad from x0. Frozen coordinates never move.

    Returns an OptimizeResult; accepted objective values are strictly
    decreasing. A failed line search ends the run with the best iterate so
    far (status line_search_failed); a non-finite objective at the start or
    at an accepted point raises TrainingError.
    """
    x = np.array(x0, dtype=float)
    if not np.all(np.isfinite(x)):
        raise TrainingError("starting point is not finite")
    if memory < 1:
        raise TrainingError(f"memory must be >= 1, got {memory}")
    if freeze_mask is not None:
        freeze_mask = np.asarray(freeze_mask, dtype=bool)
        if freeze_mask.shape != x.shape:
            raise TrainingError("freeze mask shape does not match x0")
        raw = obj.fun_grad

        def fg(z):
            f, g = raw(z)
            g = np.asarray(g, dtype=float).copy()
            g[freeze_mask] = 0.0
            return f, g
    else:
        fg = obj.fun_grad

    n_eval = 1
    f, g = fg(x)
    g = np.asarray(g, dtype=float)
    if not (math.isfinite(f) and np.all(np.isfinite(g))):
        raise TrainingError("objective non-finite at the starting point")
    gnorm = float(np.max(np.abs(g))) if g.size else 0.0
    trace = [(0, f, gnorm, 0.0)]

    s_list, y_list, rho_list = [], [], []
    status = "max_iter"
    converged = False
    if gnorm <= obj.gtol:
        status, converged = "gtol", True
        n_iter = 0
    else:
        n_iter = 0
        for it in range(1, obj.max_iter + 1):
            if s_list:
                gamma = (s_list[-1] @ y_list[-1]) / (y_list[-1] @ y_list[-1])
                p = -_two_loop(g, s_list, y_list, rho_list, gamma)
            else:
                p = -g
            if p @ g >= 0.0:  # numerical breakdown: fall back to steepest descent
                s_list, y_list, rho_list = [], [], []
                p = -g
            a_init = 1.0 if s_list or it > 1 else min(1.0, 1.0 / max(np.sum(np.abs(g)), 1e-12))
            ls = _LineSearch(fg, x, p, f, g, c1, c2)
            hit = ls.run(a_init)
            n_eval += ls.n_eval
            if hit is None:
                status = "line_search_failed"
                break
            a, f_new, g_new = hit
            if not (math.isfinite(f_new) and np.all(np.isfinite(g_new))):
                raise TrainingError(f"objective non-finite at accepted step (iteration {it})")
            s = a * p
            y = g_new - g
            x = x + s
            n_iter = it
            sy = float(s @ y)
            if sy > _CURV_EPS * float(np.linalg.norm(s)) * float(np.linalg.norm(y)):
                s_list.append(s)
                y_list.append(y)
                rho_list.append(1.0 / sy)
                if len(s_list) > memory:
                    s_list.pop(0)
                    y_list.pop(0)
                    rho_list.pop(0)
            drop = f - f_new
            f, g = f_new, g_new
            gnorm = float(np.max(np.abs(g)))
            trace.append((it, f, gnorm, a))
            if callback is not None:
                callback(it, x, f, gnorm)
            if gnorm <= obj.gtol:
                status, converged = "gtol", True
                break
            if drop <= obj.ftol * max(1.0, abs(f)):
                status, converged = "ftol", True
                break

    if freeze_mask is not None:
        x[freeze_mask] = np.asarray(x0, dtype=float)[freeze_mask]
    return OptimizeResult(x=x, fun=f, grad=g, grad_norm=gnorm, n_iter=n_iter,
                          n_eval=n_eval, status=status, converged=converged,
                          trace=np.array(trace, dtype=float))


def check_gradient(obj, x, step=1e-6, directions=None, seed=0):
    """Worst relative error between analytic and central-difference gradients.

    Per coordinate by default; for large problems pass ``directions`` to
    check that many random directional derivatives instead.
    """
    fg = obj.fun_grad if isinstance(obj, Objective) else obj
    x = np.asarray(x, dtype=float)
    _, g0 = fg(x)
    g0 = np.asarray(g0, dtype=float)

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-10)

    worst = 0.0
    if directions is None:
        for c in range(x.size):
            h = step * max(1.0, abs(x[c]))
            xp = x.copy(); xp[c] += h
            xm = x.copy(); xm[c] -= h
            fd = (fg(xp)[0] - fg(xm)[0]) / (2.0 * h)
            worst = max(worst, rel(g0[c], fd))
    else:
        rng = np.random.default_rng(seed)
        for _ in range(int(directions)):
            d = rng.standard_normal(x.size)
            d /= np.linalg.norm(d)
            fd = (fg(x + step * d)[0] - fg(x - step * d)[0]) / (2.0 * step)
            worst = max(worst, rel(float(g0 @ d), fd))
    return worst


# ---------------------------------------------------------------------------
# analytical-model fitting

ER_SCALE = 1e3  # fitted er parameter is scaled down so its gradient is O(1)

# keep er strictly above 1 even when a wild restart drives the softplus to
# its saturation floor; such restarts lose the validation selection anyway
_ER_EXCESS_MIN = 1e-12
_ER_EXCESS_MAX = 1e300


def _softplus(t):
    return np.logaddexp(0.0, t)


def _er_from(t):
    return 1.0 + min(max(float(_softplus(t)), _ER_EXCESS_MIN), _ER_EXCESS_MAX)


def _softplus_inv(y):
    # inverse of log(1 + e^t); stable for large y where t ~ y
    y = float(y)
    if y > 40.0:
        return y
    return y + math.log(-math.expm1(-y))


def _sigmoid(t):
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


def pack_am(params):
    """AnalyticalModelParams -> unconstrained parameter vector (length 100)."""
    return np.concatenate([
        np.log(params.alpha.ravel()),
        [_softplus_inv(params.er - 1.0) / ER_SCALE],
        params.phi0,
        params.phi2.ravel(),
    ])


def unpack_am(theta, topo):
    n_w = topo.n_weights
    n_m = topo.n_mzi
    alpha = np.exp(theta[:n_w]).reshape(topo.n_outputs, topo.n_inputs)
    er = _er_from(theta[n_w] * ER_SCALE)
    phi0 = theta[n_w + 1:n_w + 1 + n_m]
    phi2 = theta[n_w + 1 + n_m:].reshape(n_m, n_m)
    return mesh.AnalyticalModelParams(alpha=alpha, er=er, phi0=phi0, phi2=phi2)


def am_objective(voltages, weights_db, topo, max_iter=400, gtol=1e-12,
                 ftol=1e-15):
    """Mean-squared dB error of the analytical model as an Objective.

    Operates on the unconstrained vector of pack_am. Minimizing the mean
    square minimizes the RMSE with a gradient that stays tame near zero
    residual.
    """
    V = np.ascontiguousarray(voltages, dtype=float)
    T = np.ascontiguousarray(weights_db, dtype=float)
    if T.ndim == 3:
        T = T.reshape(T.shape[0], -1)
    L = V.shape[0]
    v2 = V * V
    ptr, mzi, sign = topo.csr()
    n_w = topo.n_weights
    n_m = topo.n_mzi
    scale = 1.0 / (n_w * L)

    def fun_grad(theta):
        alpha_k = np.exp(theta[:n_w])
        t_er = theta[n_w] * ER_SCALE
        er = _er_from(t_er)
        phi0 = theta[n_w + 1:n_w + 1 + n_m]
        phi2 = theta[n_w + 1 + n_m:].reshape(n_m, n_m)
        ss, g_alpha, g_er, g_phi0, g_phi2 = _am.fit_ss_grad(
            v2, T, alpha_k, er, phi0, phi2, ptr, mzi, sign)
        g = np.concatenate([
            g_alpha * alpha_k,                       # d/d log alpha
            [g_er * _sigmoid(t_er) * ER_SCALE],      # d/d scaled er param
            g_phi0,
            g_phi2.ravel(),
        ])
        return ss * scale, g * scale

    dim = n_w + 1 + n_m + n_m * n_m
    return Objective(fun_grad=fun_grad, dim=dim, max_iter=max_iter, gtol=gtol,
                     ftol=ftol)


def default_am_init(topo, seed=0, v_max=mesh.V_MAX, er_db=30.0):
    """Physically plausible starting point: flat quarter loss, 30 dB
    extinction, random static phases, half-period self heating, no crosstalk."""
    rng = np.random.default_rng(seed)
    phi2 = np.zeros((topo.n_mzi, topo.n_mzi))
    np.fill_diagonal(phi2, math.pi / v_max ** 2)
    return mesh.AnalyticalModelParams(
        alpha=np.full((topo.n_outputs, topo.n_inputs), 0.25),
        er=10.0 ** (er_db / 10.0),
        phi0=rng.uniform(0.0, 2.0 * math.pi, topo.n_mzi),
        phi2=phi2,
    )


def _am_jacobian(theta, topo, v2):
    """Residual Jacobian d(pred dB)/d(theta) as a (L*9, dim) matrix.

    Vectorized over records; used by the Gauss-Newton polish where L-BFGS's
    asymptotic tail (dominated by the badly scaled er direction) is too slow.
    """
    n_w, n_m = topo.n_weights, topo.n_mzi
    L = v2.shape[0]
    alpha_k = np.exp(theta[:n_w])
    t_er = theta[n_w] * ER_SCALE
    er = _er_from(t_er)
    phi0 = theta[n_w + 1:n_w + 1 + n_m]
    phi2 = theta[n_w + 1 + n_m:].reshape(n_m, n_m)

    phase = phi0 + v2 @ phi2.T            # (L, n_m)
    cosp, sinp = np.cos(phase), np.sin(phase)
    sqrt_er = math.sqrt(er)
    r = (sqrt_er - 1.0) / (sqrt_er + 1.0)
    dr_der = 1.0 / (sqrt_er * (sqrt_er + 1.0) ** 2)
    der_dt = _sigmoid(t_er) * ER_SCALE

    dim = n_w + 1 + n_m + n_m * n_m
    J = np.zeros((L, n_w, dim))
    J[:, np.arange(n_w), np.arange(n_w)] = mesh.DB_PER_LN  # d/d log alpha
    for k in range(n_w):
        i, j = divmod(k, topo.n_inputs)
        for m1 in topo.paths[(i + 1, j + 1)]:
            m = m1 - 1
            s = topo.port_sign[(i + 1, j + 1, m1)]
            f = np.maximum(0.25 * (r * r + 1.0 + 2.0 * s * r * cosp[:, m]), 1e-300)
            dln_dphi = mesh.DB_PER_LN * (-0.5 * s * r * sinp[:, m]) / f
            J[:, k, n_w + 1 + m] += dln_dphi
            J[:, k, n_w + 1 + n_m + m * n_m:n_w + 1 + n_m + (m + 1) * n_m] += \
                dln_dphi[:, None] * v2
            J[:, k, n_w] += (mesh.DB_PER_LN * 0.5 * (r + s * cosp[:, m]) / f
                             * dr_der * der_dt)
    return J.reshape(L * n_w, dim)


def _polish_lm(theta, topo, v2, target, max_steps=12):
    """Damped Gauss-Newton refinement of a converged L-BFGS iterate."""
    ptr, mzi, sign = topo.csr()
    n_w = topo.n_weights

    def residual(th):
        p = unpack_am(th, topo)
        w, _ = _am.weights_db(v2, p.alpha.reshape(-1), p.er, p.phi0, p.phi2,
                              ptr, mzi, sign, np.zeros_like(v2), -np.inf)
        return (w - target).ravel()

    res = residual(theta)
    sse = float(res @ res)
    lam = 1e-8
    for _ in range(max_steps):
        J = _am_jacobian(theta, topo, v2)
        g = J.T @ res
        H = J.T @ J
        accepted = False
        for _ in range(12):
            try:
                delta = np.linalg.solve(H + lam * np.eye(H.shape[0]), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = theta + delta
            res_t = residual(trial)
            sse_t = float(res_t @ res_t)
            if math.isfinite(sse_t) and sse_t < sse:
                theta, res, gain, sse = trial, res_t, sse - sse_t, sse_t
                lam = max(lam / 3.0, 1e-14)
                accepted = True
                break
            lam *= 10.0
        if not accepted or gain <= 1e-16 * max(1.0, sse):
            break
    return theta


@dataclass
class AmFitResult:
    params: "mesh.AnalyticalModelParams"
    train_rmse_db: float
    validation_rmse_db: float
    restart_index: int
    opt: OptimizeResult


def fit_am(dataset, topo, init=None, n_restarts=8, seed=0, max_iter=300,
           gtol=1e-12, ftol=1e-15, memory=10):
    """Fit the analytical model to the train split, multi-start on phases.

    The phase landscape is non-convex, so each restart redraws the static
    phases; the winner is the restart with the lowest validation RMSE
    (falling back to train RMSE when the dataset has no validation split).
    """
    V_tr, W_tr = dataset.arrays(SPLIT_TRAIN)
    if V_tr.shape[0] == 0:
        raise TrainingError("train split is empty")
    V_va, W_va = dataset.arrays(SPLIT_VALIDATION)
    have_val = V_va.shape[0] > 0

    obj = am_objective(V_tr, W_tr, topo, max_iter=max_iter, gtol=gtol, ftol=ftol)
    if init is None:
        init = default_am_init(topo, seed=seed)

    best = None
    for r, child in enumerate(np.random.SeedSequence(seed).spawn(max(1, n_restarts))):
        if r == 0:
            start = init
        else:
            rng = np.random.default_rng(child)
            start = mesh.AnalyticalModelParams(
                alpha=init.alpha, er=init.er,
                phi0=rng.uniform(0.0, 2.0 * math.pi, topo.n_mzi),
                phi2=init.phi2)
        res = minimize(obj, pack_am(start), memory=memory)
        # Gauss-Newton polish finishes the badly scaled er direction that
        # L-BFGS leaves behind; done per restart so selection sees final fits
        theta = _polish_lm(res.x, topo, V_tr * V_tr, W_tr)
        params = unpack_am(theta, topo)
        tr = rmse_db(eval_weights(params, topo, V_tr), W_tr)
        va = rmse_db(eval_weights(params, topo, V_va), W_va) if have_val else tr
        if best is None or va < best[0]:
            best = (va, tr, r, params, res)
    va, tr, r, params, res = best
    return AmFitResult(params=params, train_rmse_db=tr, validation_rmse_db=va,
                       restart_index=r, opt=res)


def eval_weights(params, topo, voltages):
    """Model dB weights, flattened to (L, 9) to line up with Dataset columns."""
    if voltages.shape[0] == 0:
        return np.zeros((0, topo.n_weights))
    return mesh.eval_am_batch(params, topo, voltages).reshape(
        voltages.shape[0], -1)
