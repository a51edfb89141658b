# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tile rasterizer: same math and traversal order as _raster_py."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

DEF A_MIN = 1e-14


def rasterize_forward(double[:, ::1] means2d, double[:, ::1] conics,
                      double[::1] alphas, double[:, ::1] colors,
                      double[::1] depths,
                      cnp.int64_t[::1] tile_splats, cnp.int64_t[::1] tile_offsets,
                      int height, int width, int tile_size, int n_tiles_x,
                      double alpha_cap):
    color_img = np.zeros((height, width, 3))
    depth_sum = np.zeros((height, width))
    alpha_img = np.zeros((height, width))
    cdef double[:, :, ::1] cimg = color_img
    cdef double[:, ::1] dimg = depth_sum
    cdef double[:, ::1] aimg = alpha_img
    cdef Py_ssize_t n_tiles = tile_offsets.shape[0] - 1
    cdef Py_ssize_t t, k, i
    cdef int ty, tx, y0, x0, y1, x1, py, px
    cdef cnp.int64_t lo, hi
    cdef double dx, dy, a_, b_, c_, power, g, ae, w, T
    cdef double c0, c1, c2, ds, aa, fx, fy

    for t in range(n_tiles):
        lo = tile_offsets[t]
        hi = tile_offsets[t + 1]
        if lo == hi:
            continue
        ty = <int>(t // n_tiles_x)
        tx = <int>(t % n_tiles_x)
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = y0 + tile_size
        x1 = x0 + tile_size
        if y1 > height:
            y1 = height
        if x1 > width:
            x1 = width
        for py in range(y0, y1):
            fy = <double>py
            for px in range(x0, x1):
                fx = <double>px
                T = 1.0
                c0 = c1 = c2 = 0.0
                ds = 0.0
                aa = 0.0
                for k in range(lo, hi):
                    i = tile_splats[k]
                    dx = fx - means2d[i, 0]
                    dy = fy - means2d[i, 1]
                    a_ = conics[i, 0]
                    b_ = conics[i, 1]
                    c_ = conics[i, 2]
                    power = -0.5 * (a_ * dx * dx + c_ * dy * dy) - b_ * dx * dy
                    if power > 0.0:
                        power = 0.0
                    g = exp(power)
                    ae = alphas[i] * g
                    if ae > alpha_cap:
                        ae = alpha_cap
                    if ae < A_MIN:
                        continue
                    w = ae * T
                    c0 += w * colors[i, 0]
                    c1 += w * colors[i, 1]
                    c2 += w * colors[i, 2]
                    ds += w * depths[i]
                    aa += w
                    T = T * (1.0 - ae)
                cimg[py, px, 0] = c0
                cimg[py, px, 1] = c1
                cimg[py, px, 2] = c2
                dimg[py, px] = ds
                aimg[py, px] = aa
    return color_img, depth_sum, alpha_img


def rasterize_backward(double[:, ::1] means2d, double[:, ::1] conics,
                       double[::1] alphas, double[:, ::1] colors,
                       double[::1] depths,
                       cnp.int64_t[::1] tile_splats, cnp.int64_t[::1] tile_offsets,
                       int height, int width, int tile_size, int n_tiles_x,
                       double alpha_cap,
                       double[:, :, ::1] g_color, double[:, ::1] g_depth_sum,
                       double[:, ::1] g_alpha):
    cdef Py_ssize_t n = means2d.shape[0]
    d_means2d = np.zeros((n, 2))
    d_conics = np.zeros((n, 3))
    d_alphas = np.zeros(n)
    d_colors = np.zeros((n, 3))
    d_depths = np.zeros(n)
    cdef double[:, ::1] dm = d_means2d
    cdef double[:, ::1] dc = d_conics
    cdef double[::1] da_out = d_alphas
    cdef double[:, ::1] dcol = d_colors
    cdef double[::1] dz = d_depths

    cdef Py_ssize_t n_tiles = tile_offsets.shape[0] - 1
    cdef cnp.int64_t lo, hi
    cdef Py_ssize_t max_m = 0, t, k, i, m
    for t in range(n_tiles):
        if tile_offsets[t + 1] - tile_offsets[t] > max_m:
            max_m = tile_offsets[t + 1] - tile_offsets[t]
    if max_m == 0:
        return d_means2d, d_conics, d_alphas, d_colors, d_depths

    scratch = np.zeros((5, max_m))
    cdef double[:, ::1] sc = scratch   # rows: a_eff, g, T_before, dx, dy

    cdef int ty, tx, y0, x0, y1, x1, py, px
    cdef double dx, dy, a_, b_, c_, power, g, ae, w, T
    cdef double gc0, gc1, gc2, gd, ga, dLdW, S, da, dg, dpower, fx, fy

    for t in range(n_tiles):
        lo = tile_offsets[t]
        hi = tile_offsets[t + 1]
        if lo == hi:
            continue
        m = hi - lo
        ty = <int>(t // n_tiles_x)
        tx = <int>(t % n_tiles_x)
        y0 = ty * tile_size
        x0 = tx * tile_size
        y1 = y0 + tile_size
        x1 = x0 + tile_size
        if y1 > height:
            y1 = height
        if x1 > width:
            x1 = width
        for py in range(y0, y1):
            fy = <double>py
            for px in range(x0, x1):
                fx = <double>px
                gc0 = g_color[py, px, 0]
                gc1 = g_color[py, px, 1]
                gc2 = g_color[py, px, 2]
                gd = g_depth_sum[py, px]
                ga = g_alpha[py, px]
                # forward scan, storing per-splat terms for this pixel
                T = 1.0
                for k in range(m):
                    i = tile_splats[lo + k]
                    dx = fx - means2d[i, 0]
                    dy = fy - means2d[i, 1]
                    a_ = conics[i, 0]
                    b_ = conics[i, 1]
                    c_ = conics[i, 2]
                    power = -0.5 * (a_ * dx * dx + c_ * dy * dy) - b_ * dx * dy
                    if power > 0.0:
                        power = 0.0
                    g = exp(power)
                    ae = alphas[i] * g
                    if ae > alpha_cap:
                        ae = alpha_cap
                    if ae < A_MIN:
                        ae = 0.0
                    sc[0, k] = ae
                    sc[1, k] = g
                    sc[2, k] = T
                    sc[3, k] = dx
                    sc[4, k] = dy
                    T = T * (1.0 - ae)
                # reverse scan
                S = 0.0
                for k in range(m - 1, -1, -1):
                    ae = sc[0, k]
                    if ae == 0.0:
                        continue
                    i = tile_splats[lo + k]
                    g = sc[1, k]
                    w = ae * sc[2, k]
                    dLdW = (gc0 * colors[i, 0] + gc1 * colors[i, 1]
                            + gc2 * colors[i, 2] + gd * depths[i] + ga)
                    da = sc[2, k] * dLdW - S / (1.0 - ae)
                    S += dLdW * w
                    dcol[i, 0] += w * gc0
                    dcol[i, 1] += w * gc1
                    dcol[i, 2] += w * gc2
                    dz[i] += w * gd
                    if alphas[i] * g < alpha_cap:
                        da_out[i] += g * da
                        dg = alphas[i] * da
                        dpower = g * dg
                        dx = sc[3, k]
                        dy = sc[4, k]
                        a_ = conics[i, 0]
                        b_ = conics[i, 1]
                        c_ = conics[i, 2]
                        dm[i, 0] += dpower * (a_ * dx + b_ * dy)
                        dm[i, 1] += dpower * (c_ * dy + b_ * dx)
                        dc[i, 0] += dpower * (-0.5 * dx * dx)
                        dc[i, 1] += dpower * (-dx * dy)
                        dc[i, 2] += dpower * (-0.5 * dy * dy)
    return d_means2d, d_conics, d_alphas, d_colors, d_depths
