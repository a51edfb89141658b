"""Pure-numpy tile rasterizer: reference implementation and fallback.

Front-to-back alpha compositing per pixel with effective opacity
a_i = min(alpha_i * G_i, alpha_cap). Contributions below A_MIN are skipped
in both passes so forward and backward stay consistent.
"""

from __future__ import annotations

import numpy as np

A_MIN = 1e-14


def rasterize_forward(means2d, conics, alphas, colors, depths,
                      tile_splats, tile_offsets, height, width,
                      tile_size, n_tiles_x, alpha_cap):
    color_img = np.zeros((height, width, 3))
    depth_sum = np.zeros((height, width))
    alpha_img = np.zeros((height, width))
    n_tiles = len(tile_offsets) - 1
    for t in range(n_tiles):
        lo, hi = tile_offsets[t], tile_offsets[t + 1]
        if lo == hi:
            continue
        ty, tx = divmod(t, n_tiles_x)
        y0, x0 = ty * tile_size, tx * tile_size
        y1, x1 = min(y0 + tile_size, height), min(x0 + tile_size, width)
        px, py = np.meshgrid(np.arange(x0, x1, dtype=np.float64),
                             np.arange(y0, y1, dtype=np.float64))
        px, py = px.ravel(), py.ravel()
        T = np.ones(len(px))
        C = np.zeros((len(px), 3))
        Ds = np.zeros(len(px))
        A = np.zeros(len(px))
        for i in tile_splats[lo:hi]:
            dx = px - means2d[i, 0]
            dy = py - means2d[i, 1]
            a_, b_, c_ = conics[i]
            power = -0.5 * (a_ * dx * dx + c_ * dy * dy) - b_ * dx * dy
            gauss = np.exp(np.minimum(power, 0.0))
            a_eff = np.minimum(alphas[i] * gauss, alpha_cap)
            a_eff[a_eff < A_MIN] = 0.0
            w = a_eff * T
            C += w[:, None] * colors[i]
            Ds += w * depths[i]
            A += w
            T = T * (1.0 - a_eff)
        shape = (y1 - y0, x1 - x0)
        color_img[y0:y1, x0:x1] = C.reshape(*shape, 3)
        depth_sum[y0:y1, x0:x1] = Ds.reshape(shape)
        alpha_img[y0:y1, x0:x1] = A.reshape(shape)
    return color_img, depth_sum, alpha_img


def rasterize_backward(means2d, conics, alphas, colors, depths,
                       tile_splats, tile_offsets, height, width,
                       tile_size, n_tiles_x, alpha_cap,
                       g_color, g_depth_sum, g_alpha):
    n = len(means2d)
    d_means2d = np.zeros((n, 2))
    d_conics = np.zeros((n, 3))
    d_alphas = np.zeros(n)
    d_colors = np.zeros((n, 3))
    d_depths = np.zeros(n)
    n_tiles = len(tile_offsets) - 1
    for t in range(n_tiles):
        lo, hi = tile_offsets[t], tile_offsets[t + 1]
        if lo == hi:
            continue
        ty, tx = divmod(t, n_tiles_x)
        y0, x0 = ty * tile_size, tx * tile_size
        y1, x1 = min(y0 + tile_size, height), min(x0 + tile_size, width)
        px, py = np.meshgrid(np.arange(x0, x1, dtype=np.float64),
                             np.arange(y0, y1, dtype=np.float64))
        px, py = px.ravel(), py.ravel()
        npx = len(px)
        gC = g_color[y0:y1, x0:x1].reshape(npx, 3)
        gD = g_depth_sum[y0:y1, x0:x1].reshape(npx)
        gA = g_alpha[y0:y1, x0:x1].reshape(npx)

        ids = tile_splats[lo:hi]
        m = len(ids)
        # recompute the forward pass, storing per-splat terms
        a_eff = np.zeros((m, npx))
        gauss = np.zeros((m, npx))
        T_before = np.zeros((m, npx))
        dxs = np.zeros((m, npx))
        dys = np.zeros((m, npx))
        T = np.ones(npx)
        for k, i in enumerate(ids):
            dx = px - means2d[i, 0]
            dy = py - means2d[i, 1]
            a_, b_, c_ = conics[i]
            power = -0.5 * (a_ * dx * dx + c_ * dy * dy) - b_ * dx * dy
            g = np.exp(np.minimum(power, 0.0))
            ae = np.minimum(alphas[i] * g, alpha_cap)
            ae[ae < A_MIN] = 0.0
            a_eff[k], gauss[k], T_before[k] = ae, g, T
            dxs[k], dys[k] = dx, dy
            T = T * (1.0 - ae)

        # reverse scan: dL/da_i = T_i * dLdW_i - S_after / (1 - a_i)
        S = np.zeros(npx)
        for k in range(m - 1, -1, -1):
            i = ids[k]
            w = a_eff[k] * T_before[k]
            dLdW = gC @ colors[i] + gD * depths[i] + gA
            da = T_before[k] * dLdW - S / (1.0 - a_eff[k])
            S += dLdW * w
            live = a_eff[k] > 0.0
            uncapped = live & (alphas[i] * gauss[k] < alpha_cap)
            da = np.where(live, da, 0.0)
            d_colors[i] += w @ gC
            d_depths[i] += float(w @ gD)
            d_alphas[i] += float((gauss[k] * da)[uncapped].sum())
            dg = np.where(uncapped, alphas[i] * da, 0.0)
            dpower = gauss[k] * dg
            a_, b_, c_ = conics[i]
            dx, dy = dxs[k], dys[k]
            d_means2d[i, 0] += float((dpower * (a_ * dx + b_ * dy)).sum())
            d_means2d[i, 1] += float((dpower * (c_ * dy + b_ * dx)).sum())
            d_conics[i, 0] += float((dpower * (-0.5 * dx * dx)).sum())
            d_conics[i, 1] += float((dpower * (-dx * dy)).sum())
            d_conics[i, 2] += float((dpower * (-0.5 * dy * dy)).sum())
    return d_means2d, d_conics, d_alphas, d_colors, d_depths
