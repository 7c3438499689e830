"""Pure-numpy kernels for the tanh feedforward surrogate (9 -> N1 -> N2 -> 9).

``X`` is the already-normalized input batch; regularizers and freeze masks are
applied by the caller, these kernels only handle the data term.
"""

import numpy as np


def forward(X, W1, b1, W2, b2, W3, b3):
    H1 = np.tanh(X @ W1 + b1)
    H2 = np.tanh(H1 @ W2 + b2)
    return H2 @ W3 + b3


def fit_ss_grad(X, T, W1, b1, W2, b2, W3, b3):
    """Sum of squared output residuals and its gradient w.r.t. all layers.

    Returns (ss, gW1, gb1, gW2, gb2, gW3, gb3).
    """
    H1 = np.tanh(X @ W1 + b1)
    H2 = np.tanh(H1 @ W2 + b2)
    Y = H2 @ W3 + b3
    R = Y - T
    ss = float(np.sum(R * R))
    dY = 2.0 * R
    gW3 = H2.T @ dY
    gb3 = dY.sum(axis=0)
    dZ2 = (dY @ W3.T) * (1.0 - H2 * H2)
    gW2 = H1.T @ dZ2
    gb2 = dZ2.sum(axis=0)
    dZ1 = (dZ2 @ W2.T) * (1.0 - H1 * H1)
    gW1 = X.T @ dZ1
    gb1 = dZ1.sum(axis=0)
    return ss, gW1, gb1, gW2, gb2, gW3, gb3
