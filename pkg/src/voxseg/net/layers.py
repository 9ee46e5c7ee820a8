"""Primitive differentiable ops for the segmentation network.

Tensors are (batch, d0, d1, d2, channels). Every forward returns its
output plus whatever the matching backward needs.
"""

from __future__ import annotations

import numpy as np

from .. import kernels


# --- 3x3x3 convolution (same padding) ---

def conv3x3_forward(x, w, b, stride=(1, 1, 1)):
    y = kernels.conv3d_forward(x, w, b, stride)
    return y, (x, w, stride)


def conv3x3_backward(cache, dy):
    x, w, stride = cache
    return kernels.conv3d_backward(x, w, np.ascontiguousarray(dy), stride)


# --- 1x1x1 (score / projection) convolution ---

def conv1x1_forward(x, w, b):
    y = x @ w[0, 0, 0] + b
    return y, (x, w)


def conv1x1_backward(cache, dy):
    x, w = cache
    dw = np.zeros_like(w)
    dw[0, 0, 0] = np.tensordot(x, dy, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
    db = dy.sum(axis=(0, 1, 2, 3))
    dx = dy @ w[0, 0, 0].T
    return dx, dw, db


# --- leaky ReLU ---

def leaky_relu_forward(x, leak):
    y = np.where(x > 0, x, leak * x)
    return y, (x > 0, leak)


def leaky_relu_backward(cache, dy):
    positive, leak = cache
    return np.where(positive, dy, leak * dy)


# --- batch normalization (per channel over batch + spatial axes) ---

def batchnorm_forward(x, gamma, beta, running_mean, running_var,
                      momentum, eps, train):
    """Returns (y, cache). Train mode updates running stats in place."""
    axes = (0, 1, 2, 3)
    if train:
        mean = x.mean(axis=axes, dtype=np.float64)
        var = x.var(axis=axes, dtype=np.float64)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((x - mean) * inv_std).astype(x.dtype)
    y = gamma * xhat + beta
    return y, (xhat, gamma, inv_std.astype(x.dtype), train)


def batchnorm_backward(cache, dy):
    xhat, gamma, inv_std, train = cache
    axes = (0, 1, 2, 3)
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    if not train:
        return dy * gamma * inv_std, dgamma, dbeta
    n = dy.size // dy.shape[-1]
    dxhat = dy * gamma
    dx = inv_std * (dxhat
                    - dxhat.mean(axis=axes)
                    - xhat * (dxhat * xhat).mean(axis=axes))
    # mean terms above already divide by n via .mean
    return dx.astype(dy.dtype), dgamma, dbeta


# --- linear (trilinear, separable) upsampling, align-corners-false ---

def _axis_weights(d_in, factor):
    pos = (np.arange(d_in * factor) + 0.5) / factor - 0.5
    i0 = np.clip(np.floor(pos), 0, d_in - 1).astype(np.int64)
    i1 = np.minimum(i0 + 1, d_in - 1)
    w = np.clip(pos - i0, 0.0, 1.0)
    return i0, i1, w


def _up_axis(x, axis, factor):
    i0, i1, w = _axis_weights(x.shape[axis], factor)
    shape = [1] * x.ndim
    shape[axis] = w.size
    wb = w.reshape(shape).astype(x.dtype)
    return np.take(x, i0, axis=axis) * (1 - wb) + np.take(x, i1, axis=axis) * wb


def _up_axis_backward(dy, axis, d_in, factor):
    i0, i1, w = _axis_weights(d_in, factor)
    dym = np.moveaxis(dy, axis, 0)
    dxm = np.zeros((d_in, *dym.shape[1:]), dtype=dy.dtype)
    wb = w.reshape((-1,) + (1,) * (dym.ndim - 1)).astype(dy.dtype)
    np.add.at(dxm, i0, dym * (1 - wb))
    np.add.at(dxm, i1, dym * wb)
    return np.moveaxis(dxm, 0, axis)


def upsample_forward(x, factors):
    """Upsample spatial axes by per-axis integer factors (1 or 2)."""
    y = x
    for axis, f in zip((1, 2, 3), factors):
        if f != 1:
            y = _up_axis(y, axis, f)
    return y, (x.shape, factors)


def upsample_backward(cache, dy):
    in_shape, factors = cache
    dx = dy
    for axis, f in zip((1, 2, 3), factors):
        if f != 1:
            dx = _up_axis_backward(dx, axis, in_shape[axis], f)
    return dx


# --- softmax + categorical cross-entropy ---

def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(labels, n_classes, dtype=np.float32):
    labels = np.asarray(labels)
    if labels.ndim == 5:  # already one-hot
        return labels.astype(dtype)
    out = np.zeros((*labels.shape, n_classes), dtype=dtype)
    idx = labels.astype(np.int64)
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out
