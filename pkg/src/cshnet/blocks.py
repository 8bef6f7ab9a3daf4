"""Residual, Swin and SpaceFormer building blocks.

All blocks map a ``(B, C, H, W)`` feature map to a feature map of the same
shape.  Attention blocks pad the spatial dims up to a multiple of the window
size internally and crop afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


@dataclass(frozen=True)
class AttentionConfig:
    window_size: int = 4
    num_heads: int = 1
    shift: int = 0
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.window_size < 1:
            raise ConfigError(f"window_size must be >= 1, got {self.window_size}")
        if self.num_heads < 1:
            raise ConfigError(f"num_heads must be >= 1, got {self.num_heads}")
        if self.shift not in (0, self.window_size // 2):
            raise ConfigError(
                f"shift must be 0 or window_size // 2 = {self.window_size // 2}, got {self.shift}"
            )

    @classmethod
    def for_channels(cls, channels: int, window_size: int = 4, mlp_ratio: float = 4.0):
        return cls(window_size=window_size, num_heads=max(1, channels // 32), mlp_ratio=mlp_ratio)


def _check_channels(x: torch.Tensor, channels: int, name: str):
    if x.dim() != 4:
        raise ConfigError(f"{name} expects a 4-D (B, C, H, W) tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != channels:
        raise ConfigError(f"{name} built for {channels} channels, got input with {x.shape[1]}")


class ResidualModule(nn.Module):
    """x + IN(conv3x3(ReLU(IN(conv3x3(x))))) with reflection padding."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, channels, 3)
        self.conv2 = nn.Conv2d(channels, channels, 3)

    def branch(self, x):
        y = self.conv1(F.pad(x, (1, 1, 1, 1), mode="reflect"))
        y = F.relu(F.instance_norm(y))
        y = self.conv2(F.pad(y, (1, 1, 1, 1), mode="reflect"))
        return F.instance_norm(y)

    def forward(self, x):
        _check_channels(x, self.channels, "ResidualModule")
        return x + self.branch(x)


class Mlp(nn.Module):
    def __init__(self, channels: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * nW, ws * ws, C)."""
    B, H, W, C = x.shape
    x = x.view(B, H // ws, ws, W // ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, C)


def window_reverse(windows: torch.Tensor, ws: int, H: int, W: int) -> torch.Tensor:
    """(B * nW, ws * ws, C) -> (B, H, W, C)."""
    C = windows.shape[-1]
    B = windows.shape[0] // ((H // ws) * (W // ws))
    x = windows.view(B, H // ws, W // ws, ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, H, W, C)


def shift_mask(H: int, W: int, ws: int, shift: int, device=None) -> torch.Tensor:
    """Additive attention mask (nW, N, N) keeping cyclically shifted regions apart."""
    img = torch.zeros(1, H, W, 1, device=device)
    cnt = 0
    for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
        for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            img[:, hs, wsl, :] = cnt
            cnt += 1
    mw = window_partition(img, ws).squeeze(-1)
    diff = mw.unsqueeze(1) - mw.unsqueeze(2)
    return torch.zeros_like(diff).masked_fill(diff != 0, -100.0)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside a window with learned relative position bias."""

    def __init__(self, channels: int, window_size: int, num_heads: int):
        super().__init__()
        if channels % num_heads:
            raise ConfigError(f"channels ({channels}) not divisible by num_heads ({num_heads})")
        self.channels = channels
        self.window_size = window_size
        self.num_heads = num_heads
        self.scale = (channels // num_heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads)
        )
        self.register_buffer("relative_position_index", self._position_index(window_size), persistent=False)
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)

    @staticmethod
    def _position_index(ws: int) -> torch.Tensor:
        coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (ws - 1)
        return rel[..., 0] * (2 * ws - 1) + rel[..., 1]

    def position_bias(self, ws: int) -> torch.Tensor:
        """(heads, ws*ws, ws*ws) bias; a window smaller than built reuses the central offsets."""
        full = self.window_size
        if ws == full:
            idx = self.relative_position_index
        else:
            rel = self._position_index(ws).to(self.relative_position_index.device)
            dy, dx = rel // (2 * ws - 1) - (ws - 1), rel % (2 * ws - 1) - (ws - 1)
            idx = (dy + full - 1) * (2 * full - 1) + (dx + full - 1)
        n = ws * ws
        return self.relative_position_bias_table[idx.reshape(-1)].view(n, n, -1).permute(2, 0, 1)

    def forward(self, x, mask=None, return_weights: bool = False):
        Bw, N, C = x.shape
        ws = int(round(N ** 0.5))
        h = self.num_heads
        qkv = self.qkv(x).reshape(Bw, N, 3, h, C // h).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn + self.position_bias(ws).unsqueeze(0).to(attn.dtype)
        if mask is not None:
            nW = mask.shape[0]
            attn = attn.view(Bw // nW, nW, h, N, N) + mask.to(attn.dtype)[None, :, None]
            attn = attn.view(Bw, h, N, N)
        attn = attn.softmax(dim=-1)
        out = self.proj((attn @ v).transpose(1, 2).reshape(Bw, N, C))
        return (out, attn) if return_weights else out


class WindowLayer(nn.Module):
    """One (optionally shifted) window transformer layer, pre- or post-normalized."""

    def __init__(self, channels: int, cfg: AttentionConfig, post_norm: bool = False):
        super().__init__()
        self.channels = channels
        self.cfg = cfg
        self.post_norm = post_norm
        self.norm1 = nn.LayerNorm(channels)
        self.attn = WindowAttention(channels, cfg.window_size, cfg.num_heads)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = Mlp(channels, int(channels * cfg.mlp_ratio))

    def _geometry(self, H, W):
        ws, shift = self.cfg.window_size, self.cfg.shift
        if min(H, W) <= ws:
            # one window covers the short side; shifting is meaningless
            ws, shift = min(H, W), 0
        return ws, shift

    def _attend(self, x, return_weights=False):
        """Windowed attention on a (B, H, W, C) map; returns same layout."""
        B, H, W, C = x.shape
        ws, shift = self._geometry(H, W)
        ph, pw = (-H) % ws, (-W) % ws
        if ph or pw:
            x = F.pad(x.permute(0, 3, 1, 2), (0, pw, 0, ph), mode="reflect").permute(0, 2, 3, 1)
        Hp, Wp = H + ph, W + pw
        mask = None
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
            mask = shift_mask(Hp, Wp, ws, shift, device=x.device)
        out = self.attn(window_partition(x, ws), mask=mask, return_weights=return_weights)
        weights = None
        if return_weights:
            out, weights = out
        y = window_reverse(out, ws, Hp, Wp)
        if shift:
            y = torch.roll(y, shifts=(shift, shift), dims=(1, 2))
        y = y[:, :H, :W, :].contiguous()
        return (y, weights) if return_weights else y

    def forward(self, x):
        _check_channels(x, self.channels, type(self).__name__)
        t = x.permute(0, 2, 3, 1)
        if self.post_norm:
            t = t + self.norm1(self._attend(t))
            t = t + self.norm2(self.mlp(t))
        else:
            t = t + self._attend(self.norm1(t))
            t = t + self.mlp(self.norm2(t))
        return t.permute(0, 3, 1, 2)

    def attention_weights(self, x) -> torch.Tensor:
        """Softmax weights (B * nW, heads, N, N) this layer would use on ``x``."""
        t = x.permute(0, 2, 3, 1)
        if not self.post_norm:
            t = self.norm1(t)
        return self._attend(t, return_weights=True)[1]


class SwinModule(nn.Module):
    """Two window layers: regular windows, then windows shifted by half a window."""

    def __init__(self, channels: int, cfg: AttentionConfig | None = None):
        super().__init__()
        cfg = cfg or AttentionConfig.for_channels(channels)
        self.channels = channels
        self.layers = nn.ModuleList([
            WindowLayer(channels, AttentionConfig(cfg.window_size, cfg.num_heads, 0, cfg.mlp_ratio)),
            WindowLayer(
                channels,
                AttentionConfig(cfg.window_size, cfg.num_heads, cfg.window_size // 2, cfg.mlp_ratio),
            ),
        ])

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class SpaceFormer(WindowLayer):
    """Single window layer with residual-after-norm (post-normalization)."""

    def __init__(self, channels: int, cfg: AttentionConfig | None = None):
        cfg = cfg or AttentionConfig.for_channels(channels)
        super().__init__(channels, AttentionConfig(cfg.window_size, cfg.num_heads, 0, cfg.mlp_ratio), post_norm=True)



def init_weights(module: nn.Module, std: float = 0.02):
    """normal(0, std) for conv kernels, truncated normal for attention/MLP projections."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=std)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, WindowAttention):
            nn.init.trunc_normal_(m.relative_position_bias_table, std=std)
