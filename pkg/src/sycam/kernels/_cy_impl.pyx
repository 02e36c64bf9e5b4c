# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled variants of the hot kernels. Same contracts as _numpy_impl."""

import numpy as np

cimport numpy as cnp

cnp.import_array()


def accumulate_saliency(weights, feature_maps):
    cdef double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef double[:, :, ::1] fm = np.ascontiguousarray(feature_maps, dtype=np.float64)
    cdef Py_ssize_t K = fm.shape[0], H = fm.shape[1], W = fm.shape[2]
    out_arr = np.zeros((H, W), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t k, i, j
    cdef double wk
    for k in range(K):
        wk = w[k]
        for i in range(H):
            for j in range(W):
                out[i, j] += wk * fm[k, i, j]
    return out_arr


def relu_minmax(raw):
    cdef double[:, ::1] x = np.ascontiguousarray(raw, dtype=np.float64)
    cdef Py_ssize_t H = x.shape[0], W = x.shape[1]
    out_arr = np.empty((H, W), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double v, lo, hi, span
    lo = x[0, 0] if x[0, 0] > 0.0 else 0.0
    hi = lo
    for i in range(H):
        for j in range(W):
            v = x[i, j]
            if v < 0.0:
                v = 0.0
            out[i, j] = v
            if v < lo:
                lo = v
            if v > hi:
                hi = v
    if hi == lo:
        out_arr[:] = 0.0
        return out_arr
    span = hi - lo
    for i in range(H):
        for j in range(W):
            out[i, j] = (out[i, j] - lo) / span
    return out_arr


def bilinear_resize(src, int out_h, int out_w):
    cdef double[:, ::1] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef Py_ssize_t sh = s.shape[0], sw = s.shape[1]
    out_arr = np.empty((out_h, out_w), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, y0, x0, y1, x1
    cdef double sy, sx, yy, xx, fy, fx
    sy = (sh - 1.0) / (out_h - 1.0) if out_h > 1 else 0.0
    sx = (sw - 1.0) / (out_w - 1.0) if out_w > 1 else 0.0
    for i in range(out_h):
        yy = i * sy
        y0 = <Py_ssize_t>yy
        y1 = y0 + 1 if y0 + 1 < sh else sh - 1
        fy = yy - y0
        for j in range(out_w):
            xx = j * sx
            x0 = <Py_ssize_t>xx
            x1 = x0 + 1 if x0 + 1 < sw else sw - 1
            fx = xx - x0
            out[i, j] = ((1 - fy) * ((1 - fx) * s[y0, x0] + fx * s[y0, x1])
                         + fy * ((1 - fx) * s[y1, x0] + fx * s[y1, x1]))
    return out_arr


def cell_bounds(n_cells, extent):
    base = extent // n_cells
    edges = np.arange(n_cells + 1, dtype=np.intp) * base
    edges[-1] = extent
    return edges


def perturbation_sequence(base, patch, cells, int grid_rows, int grid_cols):
    cdef double[:, :, ::1] b = np.ascontiguousarray(base, dtype=np.float64)
    cdef double[:, :, ::1] p = np.ascontiguousarray(patch, dtype=np.float64)
    cdef cnp.int64_t[:, ::1] cl = np.ascontiguousarray(cells, dtype=np.int64)
    cdef Py_ssize_t ch = b.shape[0], H = b.shape[1], W = b.shape[2]
    cdef Py_ssize_t n = cl.shape[0]
    cdef Py_ssize_t base_r = H // grid_rows, base_c = W // grid_cols
    out_arr = np.empty((n + 1, ch, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t j, d, i, k, r, c, rs, re, cs, ce
    for d in range(ch):
        for i in range(H):
            for k in range(W):
                out[0, d, i, k] = b[d, i, k]
    for j in range(n):
        for d in range(ch):
            for i in range(H):
                for k in range(W):
                    out[j + 1, d, i, k] = out[j, d, i, k]
        r = cl[j, 0]
        c = cl[j, 1]
        rs = r * base_r
        re = (r + 1) * base_r if r + 1 < grid_rows else H
        cs = c * base_c
        ce = (c + 1) * base_c if c + 1 < grid_cols else W
        for d in range(ch):
            for i in range(rs, re):
                for k in range(cs, ce):
                    out[j + 1, d, i, k] = p[d, i, k]
    return out_arr
