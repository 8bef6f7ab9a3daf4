"""CSHNet generator: encoder, SEC/CES bottleneck, guided connections, decoder.

Besides the SEC-CES bottleneck (SCB) the module builds the ablation and
baseline bottlenecks (CSB, 4xSEC, 4xCES, nine residual modules, nine Swin
modules) so that every variant shares the same encoder and decoder.
"""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .blocks import AttentionConfig, ResidualModule, SpaceFormer, SwinModule, init_weights
from .errors import ConfigError


class Bottleneck(str, enum.Enum):
    SCB = "SCB"
    CSB = "CSB"
    SEC4 = "SEC4"
    CES4 = "CES4"
    GLOBALG9 = "GLOBALG9"
    SWING9 = "SWING9"


class IGCForm(str, enum.Enum):
    NONE = "NONE"
    AX = "AX"
    XB = "XB"
    AXB = "AXB"


@dataclass(frozen=True)
class GeneratorConfig:
    base_width: int = 16
    n_downsample: int = 2
    bottleneck_variant: Bottleneck = Bottleneck.SCB
    igc_form: IGCForm = IGCForm.AXB
    image_channels: int = 3
    window_size: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        # accept plain strings from config files
        object.__setattr__(self, "bottleneck_variant", _enum(Bottleneck, self.bottleneck_variant, "bottleneck_variant"))
        object.__setattr__(self, "igc_form", _enum(IGCForm, self.igc_form, "igc_form"))
        for name in ("base_width", "image_channels", "window_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_downsample < 0:
            raise ConfigError(f"n_downsample must be >= 0, got {self.n_downsample}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be > 0, got {self.mlp_ratio}")
        if self.width % self.attention.num_heads:
            raise ConfigError(f"bottleneck width {self.width} not divisible by heads")

    @property
    def width(self) -> int:
        return self.base_width * 2 ** self.n_downsample

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig.for_channels(self.width, self.window_size, self.mlp_ratio)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bottleneck_variant"] = self.bottleneck_variant.value
        d["igc_form"] = self.igc_form.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


def _enum(kind, value, name):
    try:
        return kind(value.upper() if isinstance(value, str) else value)
    except ValueError:
        choices = ", ".join(m.value for m in kind)
        raise ConfigError(f"{name} must be one of {{{choices}}}, got {value!r}") from None


class _Gated(nn.Module):
    """Shared plumbing of SEC and CES: backbone, embedded branch, gate, 1x1 fuse."""

    def __init__(self, channels: int, cfg: AttentionConfig):
        super().__init__()
        self.channels = channels
        self.rm = ResidualModule(channels)
        self.sm = SwinModule(channels, cfg)
        self.fuse = nn.Conv2d(2 * channels, channels, 1)

    def parts(self, x) -> dict:
        raise NotImplementedError

    def forward(self, x):
        return self.fuse(self.parts(x)["concat"])


class SEC(_Gated):
    """Swin embedded CNN: the RM output gates the SM output."""

    def parts(self, x):
        if x.shape[1] != self.channels:
            raise ConfigError(f"SEC built for width {self.channels}, got {x.shape[1]}")
        x_c = self.rm(x)
        x_s = self.sm(x_c)
        x_se = x_s * torch.sigmoid(x_c)
        return {"x_c": x_c, "x_s": x_s, "x_se": x_se, "concat": torch.cat([x_c, x_se], dim=1)}


class CES(_Gated):
    """CNN embedded Swin: the SM output gates the RM output."""

    def parts(self, x):
        if x.shape[1] != self.channels:
            raise ConfigError(f"CES built for width {self.channels}, got {x.shape[1]}")
        x_s = self.sm(x)
        x_c = self.rm(x_s)
        x_ce = x_c * torch.sigmoid(x_s)
        return {"x_s": x_s, "x_c": x_c, "x_ce": x_ce, "concat": torch.cat([x_s, x_ce], dim=1)}


class IGC(nn.Module):
    """Guided connection: source image -> conv stem -> SpaceFormer -> per-element (a, b)."""

    def __init__(self, width: int, n_downsample: int, cfg: AttentionConfig,
                 form: IGCForm = IGCForm.AXB, image_channels: int = 3):
        super().__init__()
        if form is IGCForm.NONE:
            raise ConfigError("IGC instance requested with igc_form NONE")
        self.form = form
        self.width = width
        layers: list[nn.Module] = []
        cin = image_channels
        for i in range(n_downsample):
            cout = width // 2 ** (n_downsample - 1 - i)
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.ReLU(True)]
            cin = cout
        if cin != width:
            layers += [nn.Conv2d(cin, width, 3, padding=1), nn.ReLU(True)]
        self.stem = nn.Sequential(*layers[:-1])
        self.spaceformer = SpaceFormer(width, cfg)
        self.head_a = nn.Conv2d(width, width, 1) if form in (IGCForm.AX, IGCForm.AXB) else None
        self.head_b = nn.Conv2d(width, width, 1) if form in (IGCForm.XB, IGCForm.AXB) else None

    def reset_heads(self, std: float = 0.02):
        # a starts near 1 so an untrained connection passes the target through
        if self.head_a is not None:
            nn.init.normal_(self.head_a.weight, 0.0, std)
            nn.init.ones_(self.head_a.bias)
        if self.head_b is not None:
            nn.init.normal_(self.head_b.weight, 0.0, std)
            nn.init.zeros_(self.head_b.bias)

    def modulation(self, source):
        """(a, b) maps; either is None when the form omits it."""
        x_sf = self.spaceformer(self.stem(source))
        a = self.head_a(x_sf) if self.head_a is not None else None
        b = self.head_b(x_sf) if self.head_b is not None else None
        return a, b

    def forward(self, source, target):
        a, b = self.modulation(source)
        ref = a if a is not None else b
        if ref.shape != target.shape:
            raise ConfigError(
                f"IGC produces maps of shape {tuple(ref.shape)} but target has {tuple(target.shape)}"
            )
        out = target
        if a is not None:
            out = a * out
        if b is not None:
            out = out + b
        return out


class Generator(nn.Module):
    """Encoder -> bottleneck (with optional guided connections) -> decoder."""

    # guided connections act on the encoder output and after this many bottleneck blocks
    igc_site = 2

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        nb, ic = cfg.base_width, cfg.image_channels
        enc: list[nn.Module] = [nn.ReflectionPad2d(3), nn.Conv2d(ic, nb, 7), nn.InstanceNorm2d(nb), nn.ReLU(True)]
        for i in range(cfg.n_downsample):
            c = nb * 2 ** i
            enc += [nn.Conv2d(c, 2 * c, 3, stride=2, padding=1), nn.InstanceNorm2d(2 * c), nn.ReLU(True)]
        self.encoder = nn.Sequential(*enc)

        self.bottleneck = nn.ModuleList(self._bottleneck_blocks(cfg))

        dec: list[nn.Module] = []
        for i in range(cfg.n_downsample):
            c = nb * 2 ** (cfg.n_downsample - i)
            dec += [nn.ConvTranspose2d(c, c // 2, 3, stride=2, padding=1, output_padding=1),
                    nn.InstanceNorm2d(c // 2), nn.ReLU(True)]
        dec += [nn.ReflectionPad2d(3), nn.Conv2d(nb, ic, 7), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)

        if cfg.igc_form is not IGCForm.NONE:
            att = cfg.attention
            self.igc_in = IGC(cfg.width, cfg.n_downsample, att, cfg.igc_form, ic)
            self.igc_mid = IGC(cfg.width, cfg.n_downsample, att, cfg.igc_form, ic)
        else:
            self.igc_in = self.igc_mid = None

    @staticmethod
    def _bottleneck_blocks(cfg: GeneratorConfig) -> list[nn.Module]:
        C, att = cfg.width, cfg.attention
        v = cfg.bottleneck_variant
        if v is Bottleneck.SCB:
            return [SEC(C, att), CES(C, att), SEC(C, att), CES(C, att)]
        if v is Bottleneck.CSB:
            return [CES(C, att), SEC(C, att), CES(C, att), SEC(C, att)]
        if v is Bottleneck.SEC4:
            return [SEC(C, att) for _ in range(4)]
        if v is Bottleneck.CES4:
            return [CES(C, att) for _ in range(4)]
        if v is Bottleneck.GLOBALG9:
            return [ResidualModule(C) for _ in range(9)]
        return [SwinModule(C, att) for _ in range(9)]

    def forward(self, source):
        x = self.encoder(source)
        if self.igc_in is not None:
            x = self.igc_in(source, x)
        for i, block in enumerate(self.bottleneck, start=1):
            x = block(x)
            if i == self.igc_site and self.igc_mid is not None:
                x = self.igc_mid(source, x)
        return self.decoder(x)


def build_generator(cfg: GeneratorConfig, seed: int = 0) -> Generator:
    """Construct and deterministically initialise a generator."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        g = Generator(cfg)
        init_weights(g)
        for igc in (g.igc_in, g.igc_mid):
            if igc is not None:
                igc.reset_heads()
    return g


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
