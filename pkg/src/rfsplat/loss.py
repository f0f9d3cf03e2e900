"""Spectrum and scalar losses with analytic gradients, plus quality metrics.

The spectrum loss blends three terms:

    total = (1 - w_ssim - w_fourier) * L1 + w_ssim * SSIM + w_fourier * Fourier

L1 is the mean absolute difference. The SSIM term is 1 minus the mean local
structural similarity under an 11x11 Gaussian window (sigma 1.5) with
zero-padded borders and constants scaled by the ground-truth dynamic range.
The Fourier term is the mean squared magnitude difference of the
unnormalized 2D DFTs, which by Parseval equals the plain sum of squared
entry differences; the identity is asserted on every evaluation.

Every loss returns its gradient with respect to the predicted frame (or the
predicted complex scalar, packed as gradient-per-real-part plus j times
gradient-per-imaginary-part).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ShapeError

__all__ = [
    "LossReport",
    "l1_loss",
    "ssim_loss",
    "fourier_loss",
    "spectrum_loss",
    "scalar_loss",
    "metrics",
    "PSNR_CAP_DB",
]

#: serialized reports cap infinite PSNR at this value
PSNR_CAP_DB = 300.0

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_RANGE_FLOOR = 1e-6


@dataclass
class LossReport:
    """Blended spectrum loss with per-term values and the frame gradient."""

    total: float
    l1: float
    ssim: float
    fourier: float
    grad_frame: np.ndarray


def _check_shapes(pred: np.ndarray, gt: np.ndarray):
    if pred.shape != gt.shape:
        raise ShapeError(f"frame shapes differ: {pred.shape} vs {gt.shape}")


def l1_loss(pred, gt):
    """Mean absolute difference; gradient is sign(diff)/cells (0 at ties)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shapes(pred, gt)
    diff = pred - gt
    value = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    return value, grad


def _ssim_window() -> np.ndarray:
    half = _SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * _SSIM_SIGMA**2))
    g /= g.sum()
    return g


_WINDOW_1D = _ssim_window()


def _blur(a: np.ndarray) -> np.ndarray:
    out = correlate1d(a, _WINDOW_1D, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _WINDOW_1D, axis=1, mode="constant", cval=0.0)


def ssim_loss(pred, gt):
    """1 - mean local SSIM, with the exact gradient of the windowed statistics.

    Constants C1 = (0.01 D)^2 and C2 = (0.03 D)^2 use the ground-truth
    dynamic range D (floored at 1e-6 for degenerate frames). The window is
    zero-padded at the borders and the adjoint of that same correlation
    propagates the gradient, so the value/gradient pair is self-consistent
    on frames of any size.
    """
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    _check_shapes(x, y)
    drange = max(float(y.max() - y.min()), _RANGE_FLOOR)
    c1 = (_SSIM_K1 * drange) ** 2
    c2 = (_SSIM_K2 * drange) ** 2

    mu_x = _blur(x)
    mu_y = _blur(y)
    vx = _blur(x * x)
    vy = _blur(y * y)
    wxy = _blur(x * y)
    a1 = 2.0 * mu_x * mu_y + c1
    a2 = 2.0 * (wxy - mu_x * mu_y) + c2
    b1 = mu_x * mu_x + mu_y * mu_y + c1
    b2 = (vx - mu_x * mu_x) + (vy - mu_y * mu_y) + c2
    s = (a1 * a2) / (b1 * b2)
    value = 1.0 - float(np.mean(s))

    n = s.size
    ds_dmu = 2.0 * mu_y * (a2 - a1) / (b1 * b2) - 2.0 * mu_x * s * (1.0 / b1 - 1.0 / b2)
    ds_dv = -s / b2
    ds_dw = 2.0 * a1 / (b1 * b2)
    grad = -(_blur(ds_dmu) + _blur(ds_dv) * 2.0 * x + _blur(ds_dw) * y) / n
    return value, grad


def fourier_loss(pred, gt):
    """Mean squared DFT magnitude difference; equals sum |diff|^2 by Parseval.

    The value is computed through the transform and the Parseval identity is
    asserted at 1e-9 relative on every call; the gradient is 2 * diff.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shapes(pred, gt)
    spec = np.fft.fft2(pred) - np.fft.fft2(gt)
    value = float(np.sum(np.abs(spec) ** 2) / pred.size)
    diff = pred - gt
    direct = float(np.sum(diff * diff))
    assert abs(value - direct) <= 1e-9 * max(direct, 1e-30), (
        f"Parseval identity violated: {value} vs {direct}"
    )
    return value, 2.0 * diff


def spectrum_loss(pred, gt, w_ssim: float = 0.2, w_fourier: float = 0.2) -> LossReport:
    """Blend of the three frame losses with a combined gradient."""
    l1, g1 = l1_loss(pred, gt)
    ss, g2 = ssim_loss(pred, gt)
    fo, g3 = fourier_loss(pred, gt)
    w1 = 1.0 - w_ssim - w_fourier
    total = w1 * l1 + w_ssim * ss + w_fourier * fo
    grad = w1 * g1 + w_ssim * g2 + w_fourier * g3
    return LossReport(float(total), l1, ss, fo, grad)


def scalar_loss(pred: complex, gt, mode: str):
    """Single-antenna loss.

    mode 'complex': |pred - gt|^2 with gradient (2 Re diff, 2 Im diff).
    mode 'real_power': absolute dBm error between 10 log10 |pred|^2 and the
    ground-truth dBm value; |pred| = 0 is floored at -200 dBm with zero
    gradient. Gradients are packed as complex (d/dRe + j d/dIm).
    """
    pred = complex(pred)
    if mode == "complex":
        diff = pred - complex(gt)
        value = abs(diff) ** 2
        return float(value), 2.0 * diff
    if mode == "real_power":
        gt = float(gt)
        power = pred.real**2 + pred.imag**2
        if power <= 1e-20:
            return abs(-200.0 - gt), 0.0 + 0.0j
        dbm = 10.0 * np.log10(power)
        sign = np.sign(dbm - gt)
        scale = sign * (20.0 / np.log(10.0)) / power
        return float(abs(dbm - gt)), complex(scale * pred.real, scale * pred.imag)
    raise ValueError(f"unknown scalar loss mode {mode!r}")


def metrics(pred, gt) -> dict:
    """MSE, PSNR (dB, ground-truth dynamic range), and SNR (dB)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _check_shapes(pred, gt)
    diff = pred - gt
    mse = float(np.mean(np.abs(diff) ** 2))
    drange = float(np.abs(gt).max() - np.abs(gt).min()) if gt.size else 0.0
    if mse == 0.0:
        psnr = float("inf")
    elif drange == 0.0:
        psnr = float("-inf")
    else:
        psnr = float(10.0 * np.log10(drange * drange / mse))
    err = float(np.sum(np.abs(diff) ** 2))
    ref = float(np.sum(np.abs(gt) ** 2))
    if err == 0.0:
        snr = float("inf")
    elif ref == 0.0:
        snr = float("-inf")
    else:
        snr = float(-10.0 * np.log10(err / ref))
    return {"mse": mse, "psnr": psnr, "snr": snr}
