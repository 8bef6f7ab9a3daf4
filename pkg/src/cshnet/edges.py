"""Adaptive edge perception loss.

Pipeline per image: grayscale -> Gaussian blur -> Sobel magnitude -> 256-bin
histogram of the max-scaled magnitudes -> maximum-entropy threshold -> mask.
The loss is the mean squared difference between the masked edge maps of the
real and generated image.  Thresholds and masks are constants for autograd;
gradients flow through the convolutions and the mask multiplication.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, InputError

GRAY_WEIGHTS = (0.299, 0.587, 0.114)
SOBEL_EPS = 1e-12
# absolute slack for treating two entropy values as tied (absorbs float rounding)
TIE_TOL = 1e-12


@dataclass
class EdgeMap:
    magnitudes: torch.Tensor
    threshold: int


@dataclass
class Histogram256:
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def _as_batch(img: torch.Tensor) -> torch.Tensor:
    if img.dim() == 3:
        img = img.unsqueeze(0)
    if img.dim() != 4:
        raise InputError(f"expected (B, C, H, W) or (C, H, W), got {tuple(img.shape)}")
    return img


def to_grayscale(img: torch.Tensor) -> torch.Tensor:
    """[-1, 1] RGB -> (B, H, W) luminance in [0, 1]."""
    img = _as_batch(img)
    if img.shape[1] == 1:
        return (img[:, 0] + 1) / 2
    if img.shape[1] != 3:
        raise InputError(f"grayscale conversion needs 1 or 3 channels, got {img.shape[1]}")
    rgb = (img + 1) / 2
    r, g, b = GRAY_WEIGHTS
    return r * rgb[:, 0] + g * rgb[:, 1] + b * rgb[:, 2]


def gaussian_kernel1d(kernel_size: int = 5, sigma: float = 1.0, dtype=torch.float64) -> torch.Tensor:
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ConfigError(f"Gaussian kernel size must be odd and positive, got {kernel_size}")
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    r = kernel_size // 2
    x = torch.arange(-r, r + 1, dtype=torch.float64)
    k = torch.exp(-x ** 2 / (2 * sigma ** 2))
    return (k / k.sum()).to(dtype)


def _as_maps(gray: torch.Tensor) -> torch.Tensor:
    """Accept (H, W) or (B, H, W); return (B, 1, H, W)."""
    if gray.dim() == 2:
        gray = gray.unsqueeze(0)
    return gray.unsqueeze(1)


def _reflect(x, pad):
    # reflect padding needs pad < size; fall back to edge replication on tiny inputs
    mode = "reflect" if min(x.shape[-2:]) > pad else "replicate"
    return F.pad(x, (pad, pad, pad, pad), mode=mode)


def gaussian_blur(gray: torch.Tensor, kernel_size: int = 5, sigma: float = 1.0) -> torch.Tensor:
    """Separable normalized Gaussian blur with reflect padding; shape preserved."""
    k = gaussian_kernel1d(kernel_size, sigma, gray.dtype).to(gray.device)
    squeeze = gray.dim() == 2
    x = _reflect(_as_maps(gray), kernel_size // 2)
    x = F.conv2d(x, k.view(1, 1, 1, -1))
    x = F.conv2d(x, k.view(1, 1, -1, 1))
    x = x[:, 0]
    return x[0] if squeeze else x


SOBEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))


def sobel_gradients(img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    kx = torch.tensor(SOBEL_X, dtype=img.dtype, device=img.device)
    ky = kx.t()
    squeeze = img.dim() == 2
    x = _reflect(_as_maps(img), 1)
    gx = F.conv2d(x, kx.view(1, 1, 3, 3))[:, 0]
    gy = F.conv2d(x, ky.reshape(1, 1, 3, 3))[:, 0]
    return (gx[0], gy[0]) if squeeze else (gx, gy)


def sobel_magnitude(img: torch.Tensor) -> torch.Tensor:
    gx, gy = sobel_gradients(img)
    return torch.sqrt(gx ** 2 + gy ** 2 + SOBEL_EPS)


def scale_to_levels(edges) -> np.ndarray:
    """Scale magnitudes by 255 / max and round to integer levels; all-zero maps -> level 0."""
    e = edges.detach().cpu().numpy() if isinstance(edges, torch.Tensor) else np.asarray(edges)
    e = e.astype(np.float64)
    m = e.max() if e.size else 0.0
    if m <= 0:
        return np.zeros(e.shape, dtype=np.int64)
    return np.clip(np.rint(e * (255.0 / m)), 0, 255).astype(np.int64)


def edge_histogram(edges) -> Histogram256:
    levels = scale_to_levels(edges)
    return Histogram256(np.bincount(levels.ravel(), minlength=256).astype(np.int64))


def entropy_table(counts) -> np.ndarray:
    """H(q) = H_low(q) + H_high(q) for q = 0..255; an empty side contributes 0."""
    p = np.asarray(counts, dtype=np.float64)
    if p.shape != (256,):
        raise InputError(f"histogram must have 256 bins, got shape {p.shape}")
    low = np.cumsum(p)
    high = p.sum() - low
    q = np.arange(256)
    below = q[None, :] <= q[:, None]  # row q, column i
    occupied = p[None, :] > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        r_low = np.where(below & occupied, p[None, :] / low[:, None], 1.0)
        r_high = np.where(~below & occupied, p[None, :] / high[:, None], 1.0)
        h_low = -(r_low * np.log(r_low)).sum(axis=1)
        h_high = -(r_high * np.log(r_high)).sum(axis=1)
    h_low[low == 0] = 0.0
    h_high[high == 0] = 0.0
    return h_low + h_high + 0.0


def max_entropy_threshold(hist) -> int:
    """Smallest q whose partition entropy is maximal (within ``TIE_TOL``)."""
    counts = hist.counts if isinstance(hist, Histogram256) else np.asarray(hist)
    if counts.sum() <= 0:
        raise InputError("max-entropy threshold of an empty histogram")
    h = entropy_table(counts)
    return int(np.flatnonzero(h >= h.max() - TIE_TOL)[0])


def apply_threshold(edges: torch.Tensor, t: int) -> torch.Tensor:
    """Zero magnitudes whose 0-255 level is below ``t``; survivors keep their raw value."""
    if not 0 <= t <= 255:
        raise InputError(f"threshold must lie in [0, 255], got {t}")
    levels = torch.from_numpy(scale_to_levels(edges)).to(edges.device)
    mask = (levels >= t).to(edges.dtype)
    return edges * mask


def edge_map(img: torch.Tensor, kernel_size: int = 5, sigma: float = 1.0, threshold: int | None = None) -> EdgeMap:
    """Thresholded edge map of a single image (C, H, W) or (1, C, H, W)."""
    img = _as_batch(img)
    if img.shape[0] != 1:
        raise InputError("edge_map handles one image at a time")
    mag = sobel_magnitude(gaussian_blur(to_grayscale(img)[0], kernel_size, sigma))
    t = max_entropy_threshold(edge_histogram(mag)) if threshold is None else threshold
    return EdgeMap(apply_threshold(mag, t), t)


def aepl_loss(real: torch.Tensor, fake: torch.Tensor, kernel_size: int = 5, sigma: float = 1.0,
              shared_threshold: bool = False) -> torch.Tensor:
    """Mean squared difference of thresholded edge maps.

    Each image gets its own threshold unless ``shared_threshold``, in which
    case the real image's threshold is applied to both.
    """
    if real.shape != fake.shape:
        raise InputError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ")
    real, fake = _as_batch(real), _as_batch(fake)
    er = sobel_magnitude(gaussian_blur(to_grayscale(real), kernel_size, sigma))
    ef = sobel_magnitude(gaussian_blur(to_grayscale(fake), kernel_size, sigma))
    total = 0.0
    for i in range(real.shape[0]):
        tr = max_entropy_threshold(edge_histogram(er[i]))
        tf = tr if shared_threshold else max_entropy_threshold(edge_histogram(ef[i]))
        total = total + ((apply_threshold(er[i], tr) - apply_threshold(ef[i], tf)) ** 2).mean()
    return total / real.shape[0]

