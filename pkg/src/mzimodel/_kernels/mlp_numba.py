"""Numba kernels for the tanh feedforward surrogate.

Matrix products go through BLAS (``np.dot``); bias-add, tanh, and the
backward elementwise products are fused into single passes without
temporaries. Whether that beats the numpy path depends on the platform:
without SVML, numba evaluates tanh through scalar libm while numpy uses
SIMD loops, and numpy can come out ahead (see benchmarks/bench_kernels.py).
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _affine_tanh(X, W, b):
    Z = np.dot(X, W)
    for i in range(Z.shape[0]):
        for j in range(Z.shape[1]):
            Z[i, j] = math.tanh(Z[i, j] + b[j])
    return Z


@njit(cache=True)
def forward(X, W1, b1, W2, b2, W3, b3):
    H1 = _affine_tanh(X, W1, b1)
    H2 = _affine_tanh(H1, W2, b2)
    Y = np.dot(H2, W3)
    for i in range(Y.shape[0]):
        for j in range(Y.shape[1]):
            Y[i, j] += b3[j]
    return Y


@njit(cache=True)
def fit_ss_grad(X, T, W1, b1, W2, b2, W3, b3):
    H1 = _affine_tanh(X, W1, b1)
    H2 = _affine_tanh(H1, W2, b2)
    Y = np.dot(H2, W3)
    L, n_out = Y.shape
    ss = 0.0
    dY = np.empty((L, n_out))
    gb3 = np.zeros(n_out)
    for i in range(L):
        for j in range(n_out):
            r = Y[i, j] + b3[j] - T[i, j]
            ss += r * r
            d = 2.0 * r
            dY[i, j] = d
            gb3[j] += d
    gW3 = np.dot(H2.T, dY)

    dZ2 = np.dot(dY, W3.T)
    gb2 = np.zeros(W2.shape[1])
    for i in range(L):
        for j in range(dZ2.shape[1]):
            h = H2[i, j]
            dZ2[i, j] *= 1.0 - h * h
            gb2[j] += dZ2[i, j]
    gW2 = np.dot(H1.T, dZ2)

    dZ1 = np.dot(dZ2, W2.T)
    gb1 = np.zeros(W1.shape[1])
    for i in range(L):
        for j in range(dZ1.shape[1]):
            h = H1[i, j]
            dZ1[i, j] *= 1.0 - h * h
            gb1[j] += dZ1[i, j]
    gW1 = np.dot(X.T, dZ1)
    return ss, gW1, gb1, gW2, gb2, gW3, gb3
