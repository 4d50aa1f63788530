"""Reconstruction quality metrics."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 200.0


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 200 dB for identical inputs."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak**2 / mse))


def ssim(a, b, peak: float = 1.0, window: int = 8, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM over all ``window x window`` patches (stride 1, uniform weights)."""
    a, b = _pair(a, b)
    a = a.reshape(a.shape[-2:]) if a.ndim > 2 else a
    b = b.reshape(b.shape[-2:]) if b.ndim > 2 else b
    win = min(window, *a.shape)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    pa = sliding_window_view(a, (win, win))
    pb = sliding_window_view(b, (win, win))
    mu_a = pa.mean(axis=(-2, -1))
    mu_b = pb.mean(axis=(-2, -1))
    var_a = pa.var(axis=(-2, -1))
    var_b = pb.var(axis=(-2, -1))
    cov = (pa * pb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))
