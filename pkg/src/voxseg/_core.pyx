# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: same-padded 3x3x3 convolution (forward/backward)
and trilinear resampling. Mirrors voxseg.kernels.numpy_backend exactly."""

import numpy as np

cimport cython
cimport numpy as cnp

ctypedef fused floating:
    float
    double


def conv3d_forward(floating[:, :, :, :, ::1] x,
                   floating[:, :, :, :, ::1] w,
                   floating[::1] b,
                   stride):
    cdef Py_ssize_t B = x.shape[0]
    cdef Py_ssize_t D0 = x.shape[1], D1 = x.shape[2], D2 = x.shape[3]
    cdef Py_ssize_t Cin = x.shape[4], Cout = w.shape[4]
    cdef Py_ssize_t s0 = stride[0], s1 = stride[1], s2 = stride[2]
    cdef Py_ssize_t O0 = (D0 - 1) // s0 + 1
    cdef Py_ssize_t O1 = (D1 - 1) // s1 + 1
    cdef Py_ssize_t O2 = (D2 - 1) // s2 + 1

    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    y_arr = np.zeros((B, O0, O1, O2, Cout), dtype=dtype)
    cdef floating[:, :, :, :, ::1] y = y_arr

    cdef Py_ssize_t bi, o0, o1, o2, k0, k1, k2, ci, co, i0, i1, i2
    cdef floating acc, xv
    for bi in range(B):
        for o0 in range(O0):
            for o1 in range(O1):
                for o2 in range(O2):
                    for co in range(Cout):
                        y[bi, o0, o1, o2, co] = b[co]
                    for k0 in range(3):
                        i0 = o0 * s0 + k0 - 1
                        if i0 < 0 or i0 >= D0:
                            continue
                        for k1 in range(3):
                            i1 = o1 * s1 + k1 - 1
                            if i1 < 0 or i1 >= D1:
                                continue
                            for k2 in range(3):
                                i2 = o2 * s2 + k2 - 1
                                if i2 < 0 or i2 >= D2:
                                    continue
                                for ci in range(Cin):
                                    xv = x[bi, i0, i1, i2, ci]
                                    if xv == 0:
                                        continue
                                    for co in range(Cout):
                                        y[bi, o0, o1, o2, co] += xv * w[k0, k1, k2, ci, co]
    return y_arr


def conv3d_backward(floating[:, :, :, :, ::1] x,
                    floating[:, :, :, :, ::1] w,
                    floating[:, :, :, :, ::1] dy,
                    stride):
    cdef Py_ssize_t B = x.shape[0]
    cdef Py_ssize_t D0 = x.shape[1], D1 = x.shape[2], D2 = x.shape[3]
    cdef Py_ssize_t Cin = x.shape[4], Cout = w.shape[4]
    cdef Py_ssize_t s0 = stride[0], s1 = stride[1], s2 = stride[2]
    cdef Py_ssize_t O0 = dy.shape[1], O1 = dy.shape[2], O2 = dy.shape[3]

    if floating is float:
        dtype = np.float32
    else:
        dtype = np.float64
    dx_arr = np.zeros((B, D0, D1, D2, Cin), dtype=dtype)
    dw_arr = np.zeros((3, 3, 3, Cin, Cout), dtype=dtype)
    db_arr = np.zeros(Cout, dtype=dtype)
    cdef floating[:, :, :, :, ::1] dx = dx_arr
    cdef floating[:, :, :, :, ::1] dw = dw_arr
    cdef floating[::1] db = db_arr

    cdef Py_ssize_t bi, o0, o1, o2, k0, k1, k2, ci, co, i0, i1, i2
    cdef floating g
    for bi in range(B):
        for o0 in range(O0):
            for o1 in range(O1):
                for o2 in range(O2):
                    for co in range(Cout):
                        db[co] += dy[bi, o0, o1, o2, co]
                    for k0 in range(3):
                        i0 = o0 * s0 + k0 - 1
                        if i0 < 0 or i0 >= D0:
                            continue
                        for k1 in range(3):
                            i1 = o1 * s1 + k1 - 1
                            if i1 < 0 or i1 >= D1:
                                continue
                            for k2 in range(3):
                                i2 = o2 * s2 + k2 - 1
                                if i2 < 0 or i2 >= D2:
                                    continue
                                for co in range(Cout):
                                    g = dy[bi, o0, o1, o2, co]
                                    if g == 0:
                                        continue
                                    for ci in range(Cin):
                                        dw[k0, k1, k2, ci, co] += x[bi, i0, i1, i2, ci] * g
                                        dx[bi, i0, i1, i2, ci] += w[k0, k1, k2, ci, co] * g
    return dx_arr, dw_arr, db_arr


def resample_trilinear(double[:, :, ::1] data, double[:, ::1] vox, double default):
    cdef Py_ssize_t N = vox.shape[0]
    cdef Py_ssize_t D0 = data.shape[0], D1 = data.shape[1], D2 = data.shape[2]
    out_arr = np.empty(N, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t n, x0, y0, z0
    cdef double px, py, pz, fx, fy, fz
    for n in range(N):
        px = vox[n, 0]
        py = vox[n, 1]
        pz = vox[n, 2]
        if px < 0 or py < 0 or pz < 0 or px > D0 - 1 or py > D1 - 1 or pz > D2 - 1:
            out[n] = default
            continue
        x0 = <Py_ssize_t>px
        y0 = <Py_ssize_t>py
        z0 = <Py_ssize_t>pz
        if x0 > D0 - 2:
            x0 = D0 - 2
        if y0 > D1 - 2:
            y0 = D1 - 2
        if z0 > D2 - 2:
            z0 = D2 - 2
        fx = px - x0
        fy = py - y0
        fz = pz - z0
        out[n] = (
            data[x0, y0, z0] * (1 - fx) * (1 - fy) * (1 - fz)
            + data[x0, y0, z0 + 1] * (1 - fx) * (1 - fy) * fz
            + data[x0, y0 + 1, z0] * (1 - fx) * fy * (1 - fz)
            + data[x0, y0 + 1, z0 + 1] * (1 - fx) * fy * fz
            + data[x0 + 1, y0, z0] * fx * (1 - fy) * (1 - fz)
            + data[x0 + 1, y0, z0 + 1] * fx * (1 - fy) * fz
            + data[x0 + 1, y0 + 1, z0] * fx * fy * (1 - fz)
            + data[x0 + 1, y0 + 1, z0 + 1] * fx * fy * fz
        )
    return out_arr
