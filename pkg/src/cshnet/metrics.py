"""PSNR, SSIM and RMSE for images in [-1, 1]."""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .errors import InputError

DATA_RANGE = 2.0
PSNR_CAP = 100.0


def _pair(a, b):
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise InputError(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b


def psnr(a, b) -> float:
    a, b = _pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(DATA_RANGE ** 2 / mse))


def rmse(a, b) -> float:
    """Root mean squared error in 0-255 gray levels."""
    a, b = _pair(a, b)
    return float((((a - b) * 127.5) ** 2).mean().sqrt())


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a, b, window: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid Gaussian windows and channels.

    Accepts (H, W), (C, H, W) or (B, C, H, W).  Images smaller than the window
    use a window shrunk to the short side.
    """
    a, b = _pair(a, b)
    while a.dim() < 4:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    B, C, H, W = a.shape
    size = min(window, H, W)
    w = _gaussian_window(size, sigma).view(1, 1, size, size).repeat(C, 1, 1, 1)

    def filt(x):
        return F.conv2d(x, w, groups=C)

    c1 = (0.01 * DATA_RANGE) ** 2
    c2 = (0.03 * DATA_RANGE) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())
