"""Run configuration: one YAML file of flat, dot-namespaced keys.

Example::

    output.dir: runs/demo
    train.steps: 300
    generator.bottleneck_variant: SCB
    loss.aepl: 1.0

Unknown keys are rejected and every component validates its fields before any
work starts.  ``KEYS`` is the normative schema (key -> type, default).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .data import DatasetSpec
from .errors import ConfigError
from .generator import Bottleneck, GeneratorConfig, IGCForm
from .training import DiscriminatorConfig, LossWeights, TrainConfig

REQUIRED = object()

KEYS: dict[str, tuple[type, object]] = {
    "output.dir": (str, REQUIRED),
    "output.checkpoint_every": (int, 0),
    "generator.base_width": (int, 16),
    "generator.n_downsample": (int, 2),
    "generator.bottleneck_variant": (str, "SCB"),
    "generator.igc_form": (str, "AXB"),
    "generator.window_size": (int, 4),
    "generator.mlp_ratio": (float, 4.0),
    "discriminator.ndf": (int, 32),
    "discriminator.n_layers": (int, 4),
    "discriminator.scale_count": (int, 2),
    "train.lr": (float, 2e-4),
    "train.beta1": (float, 0.5),
    "train.beta2": (float, 0.999),
    "train.batch_size": (int, 1),
    "train.epochs": (int, 1),
    "train.steps": (int, None),
    "train.seed": (int, 0),
    "loss.gan": (float, 1.0),
    "loss.feat": (float, 10.0),
    "loss.cont": (float, 10.0),
    "loss.aepl": (float, 1.0),
    "loss.content_mode": (str, "pixel"),
    "loss.feature_checkpoint": (str, None),
    "aepl.sigma": (float, 1.0),
    "aepl.kernel": (int, 5),
    "aepl.shared_threshold": (bool, False),
    "dataset.kind": (str, "SYNTHETIC"),
    "dataset.size": (int, 64),
    "dataset.count": (int, 64),
    "dataset.seed": (int, 0),
    "dataset.root": (str, None),
    "dataset.test_count": (int, 8),
    "ablate.variants": (list, ["SCB", "CSB", "SEC4", "CES4", "GLOBALG9", "SWING9"]),
    "ablate.igc_forms": (list, ["AXB"]),
    "ablate.aepl": (list, [True]),
    "ablate.steps": (int, 50),
}


def _coerce(key: str, value, kind: type):
    if value is None:
        return None
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            raise ValueError
        if kind is int:
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise ValueError
            return int(float(value))
        if kind is float:
            return float(value)
        if kind is list:
            return list(value) if isinstance(value, (list, tuple)) else [value]
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}") from None


@dataclass(frozen=True)
class RunConfig:
    generator: GeneratorConfig
    discriminator: DiscriminatorConfig
    train: TrainConfig
    dataset: DatasetSpec
    output_dir: Path
    checkpoint_every: int = 0
    ablate_variants: list = field(default_factory=list)
    ablate_igc_forms: list = field(default_factory=list)
    ablate_aepl: list = field(default_factory=list)
    ablate_steps: int = 50

    @classmethod
    def from_mapping(cls, raw: dict, overrides: dict | None = None) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a mapping of dotted keys")
        raw = {**raw, **(overrides or {})}
        unknown = sorted(set(raw) - set(KEYS))
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        v = {}
        for key, (kind, default) in KEYS.items():
            if key in raw:
                v[key] = _coerce(key, raw[key], kind)
            elif default is REQUIRED:
                raise ConfigError(f"missing required field: {key}")
            else:
                v[key] = default

        def section(prefix, fn):
            try:
                return fn()
            except ConfigError as exc:
                raise ConfigError(f"{prefix}: {exc}") from None
            except TypeError as exc:
                raise ConfigError(f"{prefix}: {exc}") from None

        gen = section("generator", lambda: GeneratorConfig(
            base_width=v["generator.base_width"], n_downsample=v["generator.n_downsample"],
            bottleneck_variant=v["generator.bottleneck_variant"], igc_form=v["generator.igc_form"],
            window_size=v["generator.window_size"], mlp_ratio=v["generator.mlp_ratio"]))
        disc = section("discriminator", lambda: DiscriminatorConfig(
            v["discriminator.ndf"], v["discriminator.n_layers"], v["discriminator.scale_count"]))
        weights = section("loss", lambda: LossWeights(
            v["loss.gan"], v["loss.feat"], v["loss.cont"], v["loss.aepl"]))
        train = section("train", lambda: TrainConfig(
            lr=v["train.lr"], beta1=v["train.beta1"], beta2=v["train.beta2"],
            batch_size=v["train.batch_size"], epochs=v["train.epochs"], steps=v["train.steps"],
            seed=v["train.seed"], weights=weights, content_mode=v["loss.content_mode"],
            feature_checkpoint=v["loss.feature_checkpoint"], aepl_sigma=v["aepl.sigma"],
            aepl_kernel=v["aepl.kernel"], aepl_shared_threshold=v["aepl.shared_threshold"]))
        dataset = section("dataset", lambda: DatasetSpec(
            v["dataset.kind"], v["dataset.size"], v["dataset.count"], v["dataset.seed"],
            v["dataset.root"], v["dataset.test_count"]))
        section("dataset", lambda: dataset.check_divisible(gen.n_downsample))
        if v["output.checkpoint_every"] < 0:
            raise ConfigError("output.checkpoint_every must be >= 0")
        variants = [_choice("ablate.variants", x, Bottleneck) for x in v["ablate.variants"]]
        forms = [_choice("ablate.igc_forms", x, IGCForm) for x in v["ablate.igc_forms"]]
        aepl = [_coerce("ablate.aepl", x, bool) for x in v["ablate.aepl"]]
        if v["ablate.steps"] < 1:
            raise ConfigError("ablate.steps must be >= 1")
        return cls(gen, disc, train, dataset, Path(v["output.dir"]), v["output.checkpoint_every"],
                   variants, forms, aepl, v["ablate.steps"])

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        return cls.from_mapping(raw or {}, overrides)

    def with_steps(self, steps: int) -> "RunConfig":
        return replace(self, train=replace(self.train, steps=steps))


def _choice(key, value, kind) -> str:
    name = str(getattr(value, "value", value)).upper()
    if name not in kind.__members__:
        choices = ", ".join(m.value for m in kind)
        raise ConfigError(f"{key}: {value!r} is not one of {{{choices}}}")
    return name
