"""Forward/backward pairs for the layers of the corner-regression network.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
takes ``(dout, cache)``. Tensors are NCHW numpy arrays; the dtype of the
input is preserved so the same code runs in float32 (training) and float64
(gradient checking).
"""
from __future__ import annotations

import numpy as np

from .. import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


def conv2d_forward(x, w, b):
    """3x3 convolution, stride 1, zero padding 1. ``w`` is (out, in, 3, 3)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"bad conv shapes x={x.shape} w={w.shape}")
    n, c, h, wd = x.shape
    if w.shape[1] != c:
        raise ShapeError(f"conv expects {w.shape[1]} input channels, got {c}")
    o = w.shape[0]
    x = np.ascontiguousarray(x)
    cols = kernels.im2col3x3(x)
    w_mat = w.reshape(o, -1)
    out = cols @ w_mat.T + b
    out = np.ascontiguousarray(out.reshape(n, h, wd, o).transpose(0, 3, 1, 2))
    return out, (cols, x.shape, w)


def conv2d_backward(dout, cache):
    cols, (n, c, h, wd), w = cache
    o = w.shape[0]
    d = dout.transpose(0, 2, 3, 1).reshape(-1, o)
    dw = (d.T @ cols).reshape(w.shape)
    db = d.sum(axis=0)
    dcols = d @ w.reshape(o, -1)
    dx = kernels.col2im3x3(dcols, n, c, h, wd)
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode="train"):
    """Per-channel batch norm over (N, H, W).

    In train mode the returned cache also carries the updated running
    statistics as ``cache["new_mean"]`` / ``cache["new_var"]``; the caller
    decides whether to commit them.
    """
    shape = (1, -1, 1, 1)
    if mode == "eval":
        inv = 1.0 / np.sqrt(running_var + BN_EPS)
        xhat = (x - running_mean.reshape(shape)) * inv.reshape(shape)
        out = gamma.reshape(shape) * xhat + beta.reshape(shape)
        return out.astype(x.dtype, copy=False), {"mode": "eval", "xhat": xhat, "inv": inv, "gamma": gamma}
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    m = x.shape[0] * x.shape[2] * x.shape[3]
    if m < 2:
        raise ShapeError("batch norm in train mode needs at least 2 values per channel")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    cache = {
        "mode": "train",
        "xhat": xhat,
        "inv": inv,
        "gamma": gamma,
        "m": m,
        "new_mean": (1 - BN_MOMENTUM) * running_mean + BN_MOMENTUM * mean,
        "new_var": (1 - BN_MOMENTUM) * running_var + BN_MOMENTUM * var * (m / (m - 1)),
    }
    return out.astype(x.dtype, copy=False), cache


def batchnorm_backward(dout, cache):
    xhat, inv, gamma = cache["xhat"], cache["inv"], cache["gamma"]
    shape = (1, -1, 1, 1)
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    if cache["mode"] == "eval":
        dx = dout * (gamma * inv).reshape(shape)
        return dx, dgamma, dbeta
    m = cache["m"]
    dxhat = dout * gamma.reshape(shape)
    dx = (inv / m).reshape(shape) * (
        m * dxhat
        - dxhat.sum(axis=(0, 2, 3)).reshape(shape)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
    )
    return dx.astype(dout.dtype, copy=False), dgamma, dbeta


def maxpool_forward(x):
    """2x2 window, stride 2; odd trailing rows/columns are dropped."""
    x = np.ascontiguousarray(x)
    out, arg = kernels.maxpool2x2_forward(x)
    return out, (arg, x.shape[2], x.shape[3])


def maxpool_backward(dout, cache):
    arg, h, w = cache
    return kernels.maxpool2x2_backward(np.ascontiguousarray(dout), arg, h, w)


def fc_forward(x, w, b):
    """Affine map ``x @ w.T + b`` with ``w`` of shape (out, in)."""
    if x.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"bad fc shapes x={x.shape} w={w.shape}")
    return x @ w.T + b, (x, w)


def fc_backward(dout, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def l2_loss(pred, target):
    """Batch mean of the squared Euclidean distance; returns (loss, dpred)."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    diff = pred - target
    n = pred.shape[0]
    loss = float(np.sum(diff.astype(np.float64) ** 2) / n)
    return loss, (2.0 / n) * diff
