"""Pure-numpy implementations of the hot kernels.

3x3x3 convolution is decomposed into 27 shifted channel matmuls so the
work lands in BLAS without materialising an im2col buffer.
"""

from __future__ import annotations

import numpy as np


def _out_dims(dims, stride):
    return tuple((d + 2 - 3) // s + 1 for d, s in zip(dims, stride))


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride) -> np.ndarray:
    """Same-padded 3x3x3 convolution; x is (B, D0, D1, D2, Cin)."""
    B = x.shape[0]
    dims = x.shape[1:4]
    cout = w.shape[4]
    s0, s1, s2 = stride
    o0, o1, o2 = _out_dims(dims, stride)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    y = np.zeros((B, o0, o1, o2, cout), dtype=x.dtype)
    for k0 in range(3):
        for k1 in range(3):
            for k2 in range(3):
                xs = xp[:, k0:k0 + s0 * o0:s0, k1:k1 + s1 * o1:s1, k2:k2 + s2 * o2:s2, :]
                y += xs @ w[k0, k1, k2]
    y += b
    return y


def conv3d_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray, stride):
    """Gradients of conv3d_forward w.r.t. input, kernel and bias."""
    s0, s1, s2 = stride
    o0, o1, o2 = dy.shape[1:4]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for k0 in range(3):
        for k1 in range(3):
            for k2 in range(3):
                sl = (
                    slice(None),
                    slice(k0, k0 + s0 * o0, s0),
                    slice(k1, k1 + s1 * o1, s1),
                    slice(k2, k2 + s2 * o2, s2),
                    slice(None),
                )
                dw[k0, k1, k2] = np.tensordot(xp[sl], dy, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
                dxp[sl] += dy @ w[k0, k1, k2].T
    db = dy.sum(axis=(0, 1, 2, 3))
    dx = dxp[:, 1:-1, 1:-1, 1:-1, :]
    return np.ascontiguousarray(dx), dw, db


def resample_trilinear(data: np.ndarray, vox: np.ndarray, default: float) -> np.ndarray:
    """Trilinear gather at fractional voxel coordinates ``vox`` (N, 3).

    Samples strictly outside [0, dim-1] on any axis take ``default``.
    """
    dims = np.asarray(data.shape, dtype=np.float64)
    inside = np.all((vox >= 0.0) & (vox <= dims - 1.0), axis=1)
    out = np.full(vox.shape[0], default, dtype=np.float64)
    if not inside.any():
        return out
    p = vox[inside]
    i0 = np.minimum(np.floor(p).astype(np.int64), (dims - 2).astype(np.int64))
    i0 = np.maximum(i0, 0)
    f = p - i0
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    c = data
    acc = (
        c[x0, y0, z0] * (1 - fx) * (1 - fy) * (1 - fz)
        + c[x0, y0, z0 + 1] * (1 - fx) * (1 - fy) * fz
        + c[x0, y0 + 1, z0] * (1 - fx) * fy * (1 - fz)
        + c[x0, y0 + 1, z0 + 1] * (1 - fx) * fy * fz
        + c[x0 + 1, y0, z0] * fx * (1 - fy) * (1 - fz)
        + c[x0 + 1, y0, z0 + 1] * fx * (1 - fy) * fz
        + c[x0 + 1, y0 + 1, z0] * fx * fy * (1 - fz)
        + c[x0 + 1, y0 + 1, z0 + 1] * fx * fy * fz
    )
    out[inside] = acc
    return out
