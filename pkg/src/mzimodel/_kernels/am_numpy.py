"""Pure-numpy kernels for the analytical mesh model.

Reference implementations for the numba kernels in ``am_numba``; selected at
import time by ``MZIMODEL_BACKEND=numpy``. Paths are passed in CSR form
(``path_ptr``/``path_mzi``/``path_sign``) with 0-based MZI indices, weights
flattened row-major over (output, input).
"""

import numpy as np

DB_PER_LN = 10.0 / np.log(10.0)
_TINY = 1e-300


def weights_db(v2, alpha_k, er, phi0, phi2, path_ptr, path_mzi, path_sign,
               extra_phase, floor_db):
    """Evaluate dB weights for a batch of squared voltages.

    v2: (L, n_mzi) squared voltages; extra_phase: (L, n_mzi) additive phase.
    Returns (w_db (L, K), clipped (L, K) bool). Entries whose linear value
    falls below 10**(floor_db/10) are set to floor_db and flagged.
    """
    L = v2.shape[0]
    n_w = path_ptr.shape[0] - 1
    sqrt_er = np.sqrt(er)
    r = (sqrt_er - 1.0) / (sqrt_er + 1.0)
    phase = phi0[None, :] + v2 @ phi2.T + extra_phase
    cos_phase = np.cos(phase)
    log_lin = np.empty((L, n_w))
    for k in range(n_w):
        acc = np.full(L, np.log(alpha_k[k]))
        for p in range(path_ptr[k], path_ptr[k + 1]):
            m = path_mzi[p]
            f = 0.25 * (r * r + 1.0 + 2.0 * path_sign[p] * r * cos_phase[:, m])
            acc += np.log(np.maximum(f, _TINY))
        log_lin[:, k] = acc
    w_db = DB_PER_LN * log_lin
    clipped = w_db < floor_db
    w_db = np.where(clipped, floor_db, w_db)
    return w_db, clipped


def fit_ss_grad(v2, target, alpha_k, er, phi0, phi2, path_ptr, path_mzi,
                path_sign):
    """Sum of squared dB residuals and its gradient w.r.t. raw AM parameters.

    Predictions are *unclipped* so the objective stays smooth; callers apply
    the chain rule for any reparameterization. Returns
    (ss, g_alpha (K,), g_er, g_phi0 (n_mzi,), g_phi2 (n_mzi, n_mzi)).
    """
    L, n_mzi = v2.shape
    n_w = path_ptr.shape[0] - 1
    sqrt_er = np.sqrt(er)
    r = (sqrt_er - 1.0) / (sqrt_er + 1.0)
    phase = phi0[None, :] + v2 @ phi2.T
    cos_phase = np.cos(phase)
    sin_phase = np.sin(phase)

    # forward: log-linear weights, keeping per-path factors for the backward
    resid = np.empty((L, n_w))
    for k in range(n_w):
        acc = np.full(L, np.log(alpha_k[k]))
        for p in range(path_ptr[k], path_ptr[k + 1]):
            m = path_mzi[p]
            f = 0.25 * (r * r + 1.0 + 2.0 * path_sign[p] * r * cos_phase[:, m])
            acc += np.log(np.maximum(f, _TINY))
        resid[:, k] = DB_PER_LN * acc - target[:, k]
    ss = float(np.sum(resid * resid))

    g_alpha = np.zeros(n_w)
    g_r = 0.0
    g_phase = np.zeros((L, n_mzi))  # d(ss)/d(phase[l, m])
    for k in range(n_w):
        coeff = 2.0 * DB_PER_LN * resid[:, k]
        g_alpha[k] = np.sum(coeff) / alpha_k[k]
        for p in range(path_ptr[k], path_ptr[k + 1]):
            m = path_mzi[p]
            s = path_sign[p]
            f = 0.25 * (r * r + 1.0 + 2.0 * s * r * cos_phase[:, m])
            f = np.maximum(f, _TINY)
            g_phase[:, m] += coeff * (-0.5 * s * r * sin_phase[:, m]) / f
            g_r += float(np.sum(coeff * 0.5 * (r + s * cos_phase[:, m]) / f))
    g_phi0 = g_phase.sum(axis=0)
    g_phi2 = g_phase.T @ v2
    dr_der = 1.0 / (sqrt_er * (sqrt_er + 1.0) ** 2)
    return ss, g_alpha, g_r * dr_der, g_phi0, g_phi2
