# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``; same arithmetic order."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline void _cell(double u, double v, Py_ssize_t GY, Py_ssize_t GX, double u0, double u1,
                       double v0, double v1, Py_ssize_t* ix, Py_ssize_t* iy,
                       double* tx, double* ty, bint* in_x, bint* in_y) nogil:
    cdef double fx = (u - u0) / (u1 - u0) * GX - 0.5
    cdef double fy = (v - v0) / (v1 - v0) * GY - 0.5
    in_x[0] = fx > 0.0 and fx < GX - 1.0
    in_y[0] = fy > 0.0 and fy < GY - 1.0
    if fx < 0.0:
        fx = 0.0
    elif fx > GX - 1.0:
        fx = GX - 1.0
    if fy < 0.0:
        fy = 0.0
    elif fy > GY - 1.0:
        fy = GY - 1.0
    cdef Py_ssize_t i = <Py_ssize_t>floor(fx)
    cdef Py_ssize_t j = <Py_ssize_t>floor(fy)
    if i > GX - 2:
        i = GX - 2
    if j > GY - 2:
        j = GY - 2
    ix[0] = i
    iy[0] = j
    tx[0] = fx - i
    ty[0] = fy - j


def bilinear_sample(const double[:, :, ::1] tex, const double[:, ::1] uv, rect):
    cdef Py_ssize_t GY = tex.shape[0], GX = tex.shape[1], C = tex.shape[2], n = uv.shape[0]
    cdef double u0 = rect[0], u1 = rect[1], v0 = rect[2], v1 = rect[3]
    out_arr = np.empty((n, C))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, c, ix, iy
    cdef double tx, ty, w00, w01, w10, w11, acc
    cdef bint in_x, in_y
    with nogil:
        for p in range(n):
            _cell(uv[p, 0], uv[p, 1], GY, GX, u0, u1, v0, v1, &ix, &iy, &tx, &ty, &in_x, &in_y)
            w00 = (1.0 - tx) * (1.0 - ty)
            w01 = tx * (1.0 - ty)
            w10 = (1.0 - tx) * ty
            w11 = tx * ty
            for c in range(C):
                acc = tex[iy, ix, c] * w00 + tex[iy, ix + 1, c] * w01
                acc = acc + tex[iy + 1, ix, c] * w10
                acc = acc + tex[iy + 1, ix + 1, c] * w11
                out[p, c] = acc
    return out_arr


def bilinear_grad_uv(const double[:, :, ::1] tex, const double[:, ::1] uv, rect,
                     const double[:, ::1] grad_out):
    cdef Py_ssize_t GY = tex.shape[0], GX = tex.shape[1], C = tex.shape[2], n = uv.shape[0]
    cdef double u0 = rect[0], u1 = rect[1], v0 = rect[2], v1 = rect[3]
    cdef double sx = GX / (u1 - u0), sy = GY / (v1 - v0)
    out_arr = np.empty((n, 2))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, c, ix, iy
    cdef double tx, ty, gx, gy, dx, dy
    cdef bint in_x, in_y
    with nogil:
        for p in range(n):
            _cell(uv[p, 0], uv[p, 1], GY, GX, u0, u1, v0, v1, &ix, &iy, &tx, &ty, &in_x, &in_y)
            gx = 0.0
            gy = 0.0
            for c in range(C):
                dx = (tex[iy, ix + 1, c] - tex[iy, ix, c]) * (1.0 - ty) + (tex[iy + 1, ix + 1, c] - tex[iy + 1, ix, c]) * ty
                dy = (tex[iy + 1, ix, c] - tex[iy, ix, c]) * (1.0 - tx) + (tex[iy + 1, ix + 1, c] - tex[iy, ix + 1, c]) * tx
                gx = gx + dx * grad_out[p, c]
                gy = gy + dy * grad_out[p, c]
            out[p, 0] = gx * sx if in_x else 0.0
            out[p, 1] = gy * sy if in_y else 0.0
    return out_arr


def splat_max(const double[::1] values, const double[:, ::1] uv, Py_ssize_t G, rect):
    cdef double u0 = rect[0], u1 = rect[1], v0 = rect[2], v1 = rect[3]
    out_arr = np.zeros((G, G))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t p, ix, iy, n = uv.shape[0]
    with nogil:
        for p in range(n):
            ix = <Py_ssize_t>floor((uv[p, 0] - u0) / (u1 - u0) * G)
            iy = <Py_ssize_t>floor((uv[p, 1] - v0) / (v1 - v0) * G)
            if ix < 0 or ix >= G or iy < 0 or iy >= G:
                continue
            if values[p] > out[iy, ix]:
                out[iy, ix] = values[p]
    return out_arr


def pull_push_pass(const double[:, :, ::1] img, known_arr):
    cdef Py_ssize_t H = img.shape[0], W = img.shape[1], C = img.shape[2]
    cdef const cnp.npy_bool[:, ::1] known = np.ascontiguousarray(known_arr, dtype=np.bool_)
    out_arr = np.empty((H, W, C))
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, c
    cdef double acc, cnt
    with nogil:
        for i in range(H):
            for j in range(W):
                if known[i, j]:
                    for c in range(C):
                        out[i, j, c] = img[i, j, c]
                    continue
                cnt = 0.0
                if i > 0:
                    cnt = cnt + 1
                if i < H - 1:
                    cnt = cnt + 1
                if j > 0:
                    cnt = cnt + 1
                if j < W - 1:
                    cnt = cnt + 1
                for c in range(C):
                    acc = 0.0
                    if i > 0:
                        acc = acc + img[i - 1, j, c]
                    if i < H - 1:
                        acc = acc + img[i + 1, j, c]
                    if j > 0:
                        acc = acc + img[i, j - 1, c]
                    if j < W - 1:
                        acc = acc + img[i, j + 1, c]
                    out[i, j, c] = acc / cnt
    return out_arr
