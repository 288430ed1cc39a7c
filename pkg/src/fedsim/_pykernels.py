"""Pure-numpy local-update kernels (fallback for ``fedsim._ckernels``).

Both functions take the full per-step learning-rate vector ``etas`` (one
entry per local step) and return ``(w, max_gsq)`` where ``max_gsq`` is the
largest squared norm of the (stochastic) gradients actually applied.
"""
import numpy as np


def quad_steps(H, b, scale, w0, etas):
    w = np.array(w0, dtype=np.float64, copy=True)
    max_gsq = 0.0
    for eta in etas:
        g = scale * (H @ w - b)
        max_gsq = max(max_gsq, float(g @ g))
        w -= eta * g
    return w, max_gsq


def logistic_batch_grad(X, y, n_classes, lam, scale, w, idx):
    n_feat = X.shape[1]
    W = w[: n_classes * n_feat].reshape(n_classes, n_feat)
    bias = w[n_classes * n_feat:]
    Xb = X[idx]
    z = Xb @ W.T + bias
    z -= z.max(axis=1, keepdims=True)
    P = np.exp(z)
    P /= P.sum(axis=1, keepdims=True)
    P[np.arange(len(idx)), y[idx]] -= 1.0
    P /= len(idx)
    g = np.concatenate([(P.T @ Xb).ravel(), P.sum(axis=0)])
    return scale * (g + 2.0 * lam * w)


def logistic_steps(X, y, n_classes, lam, scale, w0, etas, batches):
    w = np.array(w0, dtype=np.float64, copy=True)
    max_gsq = 0.0
    for eta, idx in zip(etas, batches):
        g = logistic_batch_grad(X, y, n_classes, lam, scale, w, idx)
        max_gsq = max(max_gsq, float(g @ g))
        w -= eta * g
    return w, max_gsq
