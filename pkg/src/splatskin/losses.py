"""Training losses and image metrics, with analytic gradients.

The total objective is MSE color + 0.5 * MSE mask + 0.01 * (1 - SSIM).
SSIM uses the standard 11x11 Gaussian window (sigma 1.5, k1 0.01, k2 0.03,
dynamic range 1), computed per channel over the valid interior and averaged,
so it agrees with reference implementations that crop the filter margin.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    lambda_mask: float = 0.5
    lambda_ssim: float = 0.01


def _gaussian_kernel():
    r = SSIM_WINDOW // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * SSIM_SIGMA ** 2))
    return k / k.sum()


_KERNEL = _gaussian_kernel()
_PAD = SSIM_WINDOW // 2


def _gfilter(a):
    """Separable Gaussian filter, valid region only: (H-10, W-10)."""
    out = correlate1d(a, _KERNEL, axis=0, mode='constant')
    out = correlate1d(out, _KERNEL, axis=1, mode='constant')
    return out[_PAD:-_PAD, _PAD:-_PAD]


def _gfilter_adjoint(g, shape):
    """Adjoint of _gfilter: embed into the full frame, filter again."""
    full = np.zeros(shape, dtype=np.float64)
    full[_PAD:-_PAD, _PAD:-_PAD] = g
    full = correlate1d(full, _KERNEL, axis=0, mode='constant')
    return correlate1d(full, _KERNEL, axis=1, mode='constant')


def _check_pair(pred, target, name):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"{name}: shape mismatch {pred.shape} vs {target.shape}")
    return pred, target


def color_loss(pred, target):
    """Mean squared error and its gradient w.r.t. pred."""
    pred, target = _check_pair(pred, target, "color_loss")
    diff = pred - target
    n = diff.size
    return float(np.mean(diff * diff)), 2.0 * diff / n


def mask_loss(pred_alpha, target_mask):
    """MSE between the accumulated-alpha map and the foreground mask."""
    return color_loss(pred_alpha, target_mask)


def _ssim_channel(x, y):
    """Per-channel SSIM map plus everything the gradient needs."""
    mx, my = _gfilter(x), _gfilter(y)
    ex2, exy = _gfilter(x * x), _gfilter(x * y)
    ey2 = _gfilter(y * y)
    vx = ex2 - mx * mx
    vy = ey2 - my * my
    cxy = exy - mx * my
    a1 = 2.0 * mx * my + _C1
    a2 = 2.0 * cxy + _C2
    b1 = mx * mx + my * my + _C1
    b2 = vx + vy + _C2
    s = (a1 * a2) / (b1 * b2)
    return s, (mx, my, a1, a2, b1, b2)


def _ssim_channel_grad(x, y, stats, d_s):
    """dL/dx for a channel given per-pixel dL/dS."""
    mx, my, a1, a2, b1, b2 = stats
    inv = 1.0 / (b1 * b2)
    s = (a1 * a2) * inv
    # partials w.r.t. the three filtered fields that depend on x
    d_mu = d_s * (2.0 * my * (a2 - a1) * inv + 2.0 * mx * s * (1.0 / b2 - 1.0 / b1))
    d_ex2 = d_s * (-s / b2)
    d_exy = d_s * (2.0 * a1 * inv)
    shape = x.shape
    dx = _gfilter_adjoint(d_mu, shape)
    dx += _gfilter_adjoint(d_ex2, shape) * (2.0 * x)
    dx += _gfilter_adjoint(d_exy, shape) * y
    return dx


def _as_channels(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[:, :, None]
    return img


def ssim(pred, target):
    """Mean SSIM in [-1, 1]; per channel then averaged."""
    return ssim_with_grad(pred, target)[0]


def ssim_with_grad(pred, target):
    pred, target = _check_pair(pred, target, "ssim")
    p, t = _as_channels(pred), _as_channels(target)
    if p.shape[0] < SSIM_WINDOW or p.shape[1] < SSIM_WINDOW:
        raise ValueError(f"ssim: image {p.shape[:2]} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window")
    n_ch = p.shape[2]
    total = 0.0
    grad = np.zeros_like(p)
    for c in range(n_ch):
        s, stats = _ssim_channel(p[:, :, c], t[:, :, c])
        total += float(np.mean(s))
        d_s = np.full(s.shape, 1.0 / (s.size * n_ch))
        grad[:, :, c] = _ssim_channel_grad(p[:, :, c], t[:, :, c], stats, d_s)
    value = total / n_ch
    return value, grad.reshape(np.asarray(pred).shape)


def total_loss(pred_color, pred_alpha, target_image, target_mask,
               weights: LossWeights = LossWeights()):
    """Scalar objective plus dL/dcolor and dL/dalpha for render_backward."""
    c_val, c_grad = color_loss(pred_color, target_image)
    m_val, m_grad = mask_loss(pred_alpha, target_mask)
    s_val, s_grad = ssim_with_grad(pred_color, target_image)
    loss = c_val + weights.lambda_mask * m_val + weights.lambda_ssim * (1.0 - s_val)
    d_color = c_grad - weights.lambda_ssim * s_grad
    d_alpha = weights.lambda_mask * m_grad
    return loss, d_color, d_alpha


def psnr(pred, target):
    """10 log10(1 / MSE) for unit dynamic range, capped at 100 dB."""
    pred, target = _check_pair(pred, target, "psnr")
    mse = float(np.mean((pred - target) ** 2))
    if mse <= 1e-10:
        return 100.0
    return min(100.0, 10.0 * np.log10(1.0 / mse))
