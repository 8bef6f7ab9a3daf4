"""Multi-scale conditional PatchGAN and the adversarial/feature/content losses."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import init_weights
from .errors import ConfigError, InputError


@dataclass
class DiscriminatorOutput:
    patch_logits: list[torch.Tensor]
    features: list[list[torch.Tensor]]


class PatchDiscriminator(nn.Module):
    """Conv stack of ``n_layers``: all but the last stride 2, last one emits 1-channel logits."""

    def __init__(self, in_channels: int = 6, ndf: int = 64, n_layers: int = 4):
        super().__init__()
        if n_layers < 2:
            raise ConfigError(f"n_layers must be >= 2, got {n_layers}")
        self.layers = nn.ModuleList()
        cin, cout = in_channels, ndf
        for i in range(n_layers - 1):
            mods: list[nn.Module] = [nn.Conv2d(cin, cout, 4, stride=2, padding=1)]
            if i > 0:
                mods.append(nn.InstanceNorm2d(cout))
            mods.append(nn.LeakyReLU(0.2, True))
            self.layers.append(nn.Sequential(*mods))
            cin, cout = cout, min(cout * 2, ndf * 8)
        self.layers.append(nn.Conv2d(cin, 1, 4, stride=1, padding=1))

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats


class MultiscaleDiscriminator(nn.Module):
    def __init__(self, image_channels: int = 3, ndf: int = 64, n_layers: int = 4, scale_count: int = 2):
        super().__init__()
        if scale_count < 1:
            raise ConfigError(f"scale_count must be >= 1, got {scale_count}")
        self.scale_count = scale_count
        self.n_layers = n_layers
        self.scales = nn.ModuleList(
            PatchDiscriminator(2 * image_channels, ndf, n_layers) for _ in range(scale_count)
        )

    def forward(self, source, candidate) -> DiscriminatorOutput:
        if source.shape != candidate.shape:
            raise InputError(f"source {tuple(source.shape)} and candidate {tuple(candidate.shape)} differ")
        x = torch.cat([source, candidate], dim=1)
        logits, feats = [], []
        for i, d in enumerate(self.scales):
            if i:
                x = F.avg_pool2d(x, 3, stride=2, padding=1, count_include_pad=False)
            f = d(x)
            logits.append(f[-1])
            feats.append(f)
        return DiscriminatorOutput(logits, feats)


def build_discriminator(image_channels=3, ndf=64, n_layers=4, scale_count=2, seed=0) -> MultiscaleDiscriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        d = MultiscaleDiscriminator(image_channels, ndf, n_layers, scale_count)
        init_weights(d)
    return d


def lsgan_loss(logits, target_is_real: bool) -> torch.Tensor:
    """Least-squares GAN loss averaged over scales; accepts one map or a list of maps."""
    if isinstance(logits, torch.Tensor):
        logits = [logits]
    target = 1.0 if target_is_real else 0.0
    return sum(((l - target) ** 2).mean() for l in logits) / len(logits)


def feature_matching_loss(real_feats, fake_feats) -> torch.Tensor:
    """Mean L1 between matching discriminator features, averaged per scale then over scales.

    Real features are treated as constants.
    """
    if len(real_feats) != len(fake_feats):
        raise InputError(f"scale count mismatch: {len(real_feats)} vs {len(fake_feats)}")
    total = 0.0
    for rs, fs in zip(real_feats, fake_feats):
        if len(rs) != len(fs) or not rs:
            raise InputError(f"layer count mismatch: {len(rs)} vs {len(fs)}")
        layer_sum = 0.0
        for r, f in zip(rs, fs):
            if r.shape != f.shape:
                raise InputError(f"feature shape mismatch: {tuple(r.shape)} vs {tuple(f.shape)}")
            layer_sum = layer_sum + (f - r.detach()).abs().mean()
        total = total + layer_sum / len(rs)
    return total / len(real_feats)


class FeatureExtractor(nn.Module):
    """Frozen conv3x3+ReLU stack loaded from a checkpoint; features tapped after every conv.

    Checkpoint tensors are named ``features.<i>.weight`` / ``features.<i>.bias``; a 2x
    average pool separates consecutive convs.
    """

    def __init__(self, tensors: dict[str, torch.Tensor]):
        super().__init__()
        idx = sorted({int(k.split(".")[1]) for k in tensors if k.startswith("features.")})
        if not idx:
            raise ConfigError("feature extractor checkpoint holds no 'features.<i>.weight' tensors")
        self.convs = nn.ModuleList()
        for i in idx:
            w = tensors[f"features.{i}.weight"]
            conv = nn.Conv2d(w.shape[1], w.shape[0], w.shape[2], padding=w.shape[2] // 2)
            with torch.no_grad():
                conv.weight.copy_(w)
                conv.bias.copy_(tensors.get(f"features.{i}.bias", torch.zeros(w.shape[0])))
            self.convs.append(conv)
        self.requires_grad_(False)

    @classmethod
    def from_file(cls, path) -> "FeatureExtractor":
        from safetensors.torch import load_file

        return cls(load_file(str(path)))

    def forward(self, x) -> list[torch.Tensor]:
        feats = []
        for i, conv in enumerate(self.convs):
            if i:
                x = F.avg_pool2d(x, 2)
            x = F.relu(conv(x.to(conv.weight.dtype)))
            feats.append(x)
        return feats


def content_loss(real, fake, mode: str = "pixel", extractor: FeatureExtractor | str | Path | None = None,
                 levels: int = 3) -> torch.Tensor:
    """L1 over a 3-level average-pool pyramid ("pixel") or over frozen extractor features."""
    if real.shape != fake.shape:
        raise InputError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ")
    if mode == "pixel":
        total = 0.0
        a, b = real, fake
        for i in range(levels):
            if i:
                a, b = F.avg_pool2d(a, 2), F.avg_pool2d(b, 2)
            total = total + (a - b).abs().mean()
        return total / levels
    if mode == "feature":
        if extractor is None:
            raise ConfigError("content loss mode 'feature' needs a feature-extractor checkpoint")
        if not isinstance(extractor, FeatureExtractor):
            extractor = FeatureExtractor.from_file(extractor)
        fr, ff = extractor(real), extractor(fake)
        return sum((f - r.detach()).abs().mean() for r, f in zip(fr, ff)) / len(fr)
    raise ConfigError(f"content loss mode must be 'pixel' or 'feature', got {mode!r}")
