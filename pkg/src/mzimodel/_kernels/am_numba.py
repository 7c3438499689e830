"""Numba kernels for the analytical mesh model.

Same contracts as ``am_numpy``; loops are laid out per record so nothing
allocates inside the hot path. All accumulation orders are fixed, keeping
results deterministic run to run.
"""

import math

import numpy as np
from numba import njit

DB_PER_LN = 10.0 / math.log(10.0)
_TINY = 1e-300


@njit(cache=True)
def weights_db(v2, alpha_k, er, phi0, phi2, path_ptr, path_mzi, path_sign,
               extra_phase, floor_db):
    L = v2.shape[0]
    n_mzi = phi0.shape[0]
    n_w = path_ptr.shape[0] - 1
    sqrt_er = math.sqrt(er)
    r = (sqrt_er - 1.0) / (sqrt_er + 1.0)
    w_db = np.empty((L, n_w))
    clipped = np.zeros((L, n_w), dtype=np.bool_)
    phase = np.empty(n_mzi)
    for l in range(L):
        for m in range(n_mzi):
            acc = phi0[m] + extra_phase[l, m]
            for n in range(n_mzi):
                acc += phi2[m, n] * v2[l, n]
            phase[m] = acc
        for k in range(n_w):
            log_lin = math.log(alpha_k[k])
            for p in range(path_ptr[k], path_ptr[k + 1]):
                m = path_mzi[p]
                f = 0.25 * (r * r + 1.0
                            + 2.0 * path_sign[p] * r * math.cos(phase[m]))
                log_lin += math.log(max(f, _TINY))
            db = DB_PER_LN * log_lin
            if db < floor_db:
                w_db[l, k] = floor_db
                clipped[l, k] = True
            else:
                w_db[l, k] = db
    return w_db, clipped


@njit(cache=True)
def fit_ss_grad(v2, target, alpha_k, er, phi0, phi2, path_ptr, path_mzi,
                path_sign):
    L, n_mzi = v2.shape
    n_w = path_ptr.shape[0] - 1
    sqrt_er = math.sqrt(er)
    r = (sqrt_er - 1.0) / (sqrt_er + 1.0)

    ss = 0.0
    g_alpha = np.zeros(n_w)
    g_r = 0.0
    g_phi0 = np.zeros(n_mzi)
    g_phi2 = np.zeros((n_mzi, n_mzi))

    phase = np.empty(n_mzi)
    cos_phase = np.empty(n_mzi)
    sin_phase = np.empty(n_mzi)
    g_phase = np.empty(n_mzi)
    for l in range(L):
        for m in range(n_mzi):
            acc = phi0[m]
            for n in range(n_mzi):
                acc += phi2[m, n] * v2[l, n]
            phase[m] = acc
            cos_phase[m] = math.cos(acc)
            sin_phase[m] = math.sin(acc)
            g_phase[m] = 0.0
        for k in range(n_w):
            log_lin = math.log(alpha_k[k])
            for p in range(path_ptr[k], path_ptr[k + 1]):
                m = path_mzi[p]
                f = 0.25 * (r * r + 1.0
                            + 2.0 * path_sign[p] * r * cos_phase[m])
                log_lin += math.log(max(f, _TINY))
            resid = DB_PER_LN * log_lin - target[l, k]
            ss += resid * resid
            coeff = 2.0 * DB_PER_LN * resid
            g_alpha[k] += coeff / alpha_k[k]
            for p in range(path_ptr[k], path_ptr[k + 1]):
                m = path_mzi[p]
                s = path_sign[p]
                f = max(0.25 * (r * r + 1.0 + 2.0 * s * r * cos_phase[m]),
                        _TINY)
                g_phase[m] += coeff * (-0.5 * s * r * sin_phase[m]) / f
                g_r += coeff * 0.5 * (r + s * cos_phase[m]) / f
        for m in range(n_mzi):
            gm = g_phase[m]
            if gm != 0.0:
                g_phi0[m] += gm
                for n in range(n_mzi):
                    g_phi2[m, n] += gm * v2[l, n]
    dr_der = 1.0 / (sqrt_er * (sqrt_er + 1.0) ** 2)
    return ss, g_alpha, g_r * dr_der, g_phi0, g_phi2
