"""Windowed SSIM with a hand-derived backward pass.

Uses an 11x11 Gaussian window (sigma 1.5), C1=0.01^2, C2=0.03^2, channels
averaged, evaluated on the valid (fully-windowed) interior so the filter
and its adjoint are exact transposes of each other.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

WINDOW = 11
SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2
_HALF = WINDOW // 2


def _gauss_kernel():
    x = np.arange(WINDOW) - _HALF
    k = np.exp(-0.5 * (x / SIGMA) ** 2)
    return k / k.sum()

_KERNEL = _gauss_kernel()


def _filt(img):
    """Separable window filter, valid region only. img: (H,W) -> (H-10,W-10)."""
    out = correlate1d(img, _KERNEL, axis=0, mode="constant", cval=0.0)
    out = correlate1d(out, _KERNEL, axis=1, mode="constant", cval=0.0)
    return out[_HALF:-_HALF, _HALF:-_HALF]


def _filt_adjoint(grad, shape):
    """Transpose of _filt: scatter a valid-region map back to full size."""
    full = np.zeros(shape)
    full[_HALF:-_HALF, _HALF:-_HALF] = grad
    full = correlate1d(full, _KERNEL, axis=0, mode="constant", cval=0.0)
    full = correlate1d(full, _KERNEL, axis=1, mode="constant", cval=0.0)
    return full


def _channels(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[..., None]
    return img


def ssim(img, ref, with_grad: bool = False):
    """Mean SSIM over channels and valid pixels; optionally also the
    gradient with respect to the first argument."""
    x_full = _channels(img)
    y_full = _channels(ref)
    if x_full.shape != y_full.shape:
        raise ValueError(f"image shapes differ: {x_full.shape} vs {y_full.shape}")
    h, w, nc = x_full.shape
    if h < WINDOW or w < WINDOW:
        raise ValueError(f"images must be at least {WINDOW}x{WINDOW}")
    total = 0.0
    grad = np.zeros_like(x_full) if with_grad else None
    count = (h - 2 * _HALF) * (w - 2 * _HALF) * nc
    for ch in range(nc):
        x, y = x_full[..., ch], y_full[..., ch]
        mu_x, mu_y = _filt(x), _filt(y)
        sxx = _filt(x * x) - mu_x**2
        syy = _filt(y * y) - mu_y**2
        sxy = _filt(x * y) - mu_x * mu_y
        A1 = 2 * mu_x * mu_y + C1
        A2 = 2 * sxy + C2
        B1 = mu_x**2 + mu_y**2 + C1
        B2 = sxx + syy + C2
        S = (A1 * A2) / (B1 * B2)
        total += S.sum()
        if with_grad:
            dS_dmux = 2 * mu_y * A2 / (B1 * B2) - 2 * mu_x * A1 * A2 / (B1**2 * B2)
            dS_dsxx = -A1 * A2 / (B1 * B2**2)
            dS_dsxy = 2 * A1 / (B1 * B2)
            gx = _filt_adjoint(dS_dmux, (h, w))
            gx += 2 * x * _filt_adjoint(dS_dsxx, (h, w))
            gx -= 2 * _filt_adjoint(dS_dsxx * mu_x, (h, w))
            gx += y * _filt_adjoint(dS_dsxy, (h, w))
            gx -= _filt_adjoint(dS_dsxy * mu_y, (h, w))
            grad[..., ch] = gx
    value = total / count
    if not with_grad:
        return value
    grad /= count
    if np.asarray(img).ndim == 2:
        grad = grad[..., 0]
    return value, grad


def d_ssim(img, ref, with_grad: bool = False):
    """Structural dissimilarity (1 - SSIM) / 2 in [0, 1]."""
    if with_grad:
        value, grad = ssim(img, ref, with_grad=True)
        return (1.0 - value) / 2.0, -0.5 * grad
    return (1.0 - ssim(img, ref)) / 2.0
