"""Adversarial training loop, checkpoints and evaluation."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image
from safetensors.torch import load_file, save_file

from .adversarial import FeatureExtractor, build_discriminator, content_loss, feature_matching_loss, lsgan_loss
from .data import ImagePair, denormalize
from .edges import aepl_loss
from .errors import ConfigError, InputError, TrainingError
from .generator import GeneratorConfig, build_generator
from .metrics import psnr, rmse, ssim

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "cshnet-checkpoint/1"
META_KEY = "cshnet"
TERMS = ("gan", "feat", "cont", "aepl")
CSV_COLUMNS = ("step", "loss_gan", "loss_feat", "loss_cont", "loss_aepl", "loss_total", "loss_disc")


@dataclass(frozen=True)
class LossWeights:
    gan: float = 1.0
    feat: float = 10.0
    cont: float = 10.0
    aepl: float = 1.0

    def __post_init__(self):
        for name in TERMS:
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {v}")


def total_loss(terms, w: LossWeights = LossWeights()):
    """Weighted sum gan, feat, cont, aepl; ``terms`` is a mapping or a 4-sequence in that order."""
    if not isinstance(terms, dict):
        terms = dict(zip(TERMS, terms))
    for name in TERMS:
        v = terms[name]
        v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(v):
            raise TrainingError(f"non-finite loss term {name}: {v}", {"term": name})
    return (w.gan * terms["gan"] + w.feat * terms["feat"]
            + w.cont * terms["cont"] + w.aepl * terms["aepl"])


@dataclass(frozen=True)
class DiscriminatorConfig:
    ndf: int = 32
    n_layers: int = 4
    scale_count: int = 2

    def __post_init__(self):
        if self.ndf < 1 or self.n_layers < 2 or self.scale_count < 1:
            raise ConfigError(f"invalid discriminator config {self}")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    epochs: int = 1
    steps: int | None = None
    seed: int = 0
    weights: LossWeights = LossWeights()
    content_mode: str = "pixel"
    feature_checkpoint: str | None = None
    aepl_sigma: float = 1.0
    aepl_kernel: int = 5
    aepl_shared_threshold: bool = False

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.steps is not None and self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.content_mode not in ("pixel", "feature"):
            raise ConfigError(f"content_mode must be 'pixel' or 'feature', got {self.content_mode!r}")
        if self.content_mode == "feature" and not self.feature_checkpoint:
            raise ConfigError("content_mode 'feature' needs feature_checkpoint")
        if self.aepl_kernel % 2 == 0 or self.aepl_sigma <= 0:
            raise ConfigError("aepl_kernel must be odd and aepl_sigma positive")

    def total_steps(self, dataset_size: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * math.ceil(dataset_size / self.batch_size)


def _history() -> dict[str, list[float]]:
    return {c: [] for c in CSV_COLUMNS[1:]}


@dataclass
class TrainState:
    generator: torch.nn.Module
    discriminator: torch.nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    gen_config: GeneratorConfig
    disc_config: DiscriminatorConfig
    train_config: TrainConfig
    step: int = 0
    history: dict[str, list[float]] = field(default_factory=_history)
    extractor: FeatureExtractor | None = None
    dataset_config: dict | None = None  # provenance only; round-trips through checkpoints


def init_state(gen_config: GeneratorConfig, train_config: TrainConfig,
               disc_config: DiscriminatorConfig = DiscriminatorConfig()) -> TrainState:
    g = build_generator(gen_config, seed=train_config.seed)
    d = build_discriminator(gen_config.image_channels, disc_config.ndf, disc_config.n_layers,
                            disc_config.scale_count, seed=train_config.seed + 1)
    betas = (train_config.beta1, train_config.beta2)
    extractor = None
    if train_config.content_mode == "feature":
        extractor = FeatureExtractor.from_file(train_config.feature_checkpoint)
    return TrainState(
        generator=g,
        discriminator=d,
        opt_g=torch.optim.Adam(g.parameters(), lr=train_config.lr, betas=betas),
        opt_d=torch.optim.Adam(d.parameters(), lr=train_config.lr, betas=betas),
        gen_config=gen_config,
        disc_config=disc_config,
        train_config=train_config,
        extractor=extractor,
    )


def batch_indices(seed: int, dataset_size: int, batch_size: int, step: int) -> list[int]:
    """Dataset indices for ``step``: a seeded permutation per epoch, independent of history."""
    out = []
    for pos in range(step * batch_size, (step + 1) * batch_size):
        epoch, k = divmod(pos, dataset_size)
        perm = np.random.default_rng([seed, epoch]).permutation(dataset_size)
        out.append(int(perm[k]))
    return out


def make_batch(pairs: Sequence[ImagePair], indices) -> tuple[torch.Tensor, torch.Tensor]:
    src = torch.stack([pairs[i].source for i in indices])
    tgt = torch.stack([pairs[i].target for i in indices])
    return src, tgt


def train_step(state: TrainState, batch) -> TrainState:
    """One discriminator update (real vs fake) followed by one generator update."""
    source, target = batch
    G, D, cfg = state.generator, state.discriminator, state.train_config
    G.train()
    D.train()

    with torch.no_grad():
        fake = G(source)
    d_real = D(source, target)
    d_fake = D(source, fake)
    loss_d = 0.5 * (lsgan_loss(d_real.patch_logits, True) + lsgan_loss(d_fake.patch_logits, False))
    if not torch.isfinite(loss_d):
        raise TrainingError(f"non-finite discriminator loss at step {state.step + 1}",
                            {"step": state.step + 1, "loss_disc": float(loss_d)})
    state.opt_d.zero_grad(set_to_none=True)
    loss_d.backward()
    state.opt_d.step()

    fake = G(source)
    out_fake = D(source, fake)
    with torch.no_grad():
        out_real = D(source, target)
    terms = {
        "gan": lsgan_loss(out_fake.patch_logits, True),
        # hidden layers only; the final logits are already judged by the GAN term
        "feat": feature_matching_loss([f[:-1] for f in out_real.features], [f[:-1] for f in out_fake.features]),
        "cont": content_loss(target, fake, cfg.content_mode, state.extractor),
        "aepl": aepl_loss(target, fake, cfg.aepl_kernel, cfg.aepl_sigma, cfg.aepl_shared_threshold),
    }
    try:
        loss_g = total_loss(terms, cfg.weights)
    except TrainingError as exc:
        exc.snapshot.update(step=state.step + 1, **{k: float(v.detach()) for k, v in terms.items()})
        raise
    state.opt_g.zero_grad(set_to_none=True)
    loss_g.backward()
    state.opt_g.step()
    state.opt_d.zero_grad(set_to_none=True)

    state.step += 1
    record = {f"loss_{k}": float(v.detach()) for k, v in terms.items()}
    record.update(loss_total=float(loss_g.detach()), loss_disc=float(loss_d.detach()))
    for k, v in record.items():
        state.history[k].append(v)
    return state


def fit(state: TrainState, pairs: Sequence[ImagePair], steps: int | None = None,
        callback: Callable[[TrainState], None] | None = None) -> TrainState:
    """Run until ``state.step`` reaches ``steps`` (default: the configured total)."""
    if not pairs:
        raise InputError("training set is empty")
    cfg = state.train_config
    steps = cfg.total_steps(len(pairs)) if steps is None else steps
    while state.step < steps:
        idx = batch_indices(cfg.seed, len(pairs), cfg.batch_size, state.step)
        train_step(state, make_batch(pairs, idx))
        if callback is not None:
            callback(state)
    return state


def write_loss_csv(history: dict[str, list[float]], path) -> Path:
    path = Path(path)
    n = len(history["loss_total"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for i in range(n):
            w.writerow([i + 1] + [repr(history[c][i]) for c in CSV_COLUMNS[1:]])
    return path


# -- checkpoints -------------------------------------------------------------

def _optimizer_tensors(prefix: str, opt: torch.optim.Optimizer, params) -> dict[str, torch.Tensor]:
    out = {}
    for i, p in enumerate(params):
        st = opt.state.get(p)
        if not st:
            continue
        for key in ("step", "exp_avg", "exp_avg_sq"):
            t = st[key]
            t = t if isinstance(t, torch.Tensor) else torch.tensor(float(t))
            out[f"{prefix}.{i}.{key}"] = t.detach().to(torch.float32).contiguous()
    return out


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    tensors = {}
    for prefix, module in (("generator", state.generator), ("discriminator", state.discriminator)):
        for name, t in module.state_dict().items():
            tensors[f"{prefix}.{name}"] = t.detach().to(torch.float32).contiguous()
    tensors.update(_optimizer_tensors("opt_g", state.opt_g, list(state.generator.parameters())))
    tensors.update(_optimizer_tensors("opt_d", state.opt_d, list(state.discriminator.parameters())))
    tc = asdict(state.train_config)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "generator_config": json.dumps(state.gen_config.to_dict(), sort_keys=True),
        "discriminator_config": json.dumps(asdict(state.disc_config), sort_keys=True),
        "train_config": json.dumps(tc, sort_keys=True),
        "step": str(state.step),
        "history": json.dumps(state.history, sort_keys=True),
        "dataset_config": json.dumps(state.dataset_config, sort_keys=True),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    # safetensors does not preserve metadata key order, so everything travels as one sorted blob
    save_file(tensors, str(path), metadata={META_KEY: json.dumps(meta, sort_keys=True)})
    return path


def read_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict[str, str]]:
    from safetensors import safe_open

    try:
        with safe_open(str(path), framework="pt") as fh:
            raw = fh.metadata() or {}
        tensors = load_file(str(path))
        meta = json.loads(raw.get(META_KEY, "{}"))
    except Exception as exc:  # safetensors raises several unrelated types on bad files
        raise InputError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{path} is not a {CHECKPOINT_FORMAT} file (format={meta.get('format')!r})")
    return tensors, meta


def _load_module(module: torch.nn.Module, prefix: str, tensors: dict[str, torch.Tensor]):
    own = module.state_dict()
    for name, ref in own.items():
        key = f"{prefix}.{name}"
        if key not in tensors:
            raise InputError(f"checkpoint lacks tensor {key}")
        if tuple(tensors[key].shape) != tuple(ref.shape):
            raise InputError(f"shape mismatch for {key}: checkpoint {tuple(tensors[key].shape)} vs model {tuple(ref.shape)}")
    extra = sorted(k for k in tensors if k.startswith(prefix + ".") and k[len(prefix) + 1:] not in own)
    if extra:
        raise InputError(f"unexpected tensor {extra[0]} in checkpoint")
    module.load_state_dict({n: tensors[f"{prefix}.{n}"].to(own[n].dtype) for n in own})


def _load_optimizer(opt: torch.optim.Optimizer, prefix: str, params, tensors):
    for i, p in enumerate(params):
        keys = [f"{prefix}.{i}.{k}" for k in ("step", "exp_avg", "exp_avg_sq")]
        if keys[0] not in tensors:
            continue
        for k in keys[1:]:
            if tuple(tensors[k].shape) != tuple(p.shape):
                raise InputError(f"shape mismatch for {k}: checkpoint {tuple(tensors[k].shape)} vs {tuple(p.shape)}")
        opt.state[p] = {
            "step": tensors[keys[0]].clone(),
            "exp_avg": tensors[keys[1]].to(p.dtype).clone(),
            "exp_avg_sq": tensors[keys[2]].to(p.dtype).clone(),
        }


def load_checkpoint(path, expected_config: GeneratorConfig | None = None) -> TrainState:
    """Rebuild a full training state; rejects files whose generator config differs from ``expected_config``."""
    tensors, meta = read_checkpoint(path)
    gen_config = GeneratorConfig.from_dict(json.loads(meta["generator_config"]))
    if expected_config is not None and gen_config != expected_config:
        raise InputError(f"checkpoint generator config {gen_config.to_dict()} != expected {expected_config.to_dict()}")
    disc_config = DiscriminatorConfig(**json.loads(meta["discriminator_config"]))
    train_config = TrainConfig(**json.loads(meta["train_config"]))
    state = init_state(gen_config, train_config, disc_config)
    _load_module(state.generator, "generator", tensors)
    _load_module(state.discriminator, "discriminator", tensors)
    _load_optimizer(state.opt_g, "opt_g", list(state.generator.parameters()), tensors)
    _load_optimizer(state.opt_d, "opt_d", list(state.discriminator.parameters()), tensors)
    state.step = int(meta["step"])
    state.history = json.loads(meta["history"])
    state.dataset_config = json.loads(meta.get("dataset_config", "null"))
    return state


def load_generator(path):
    """Generator-only view of a checkpoint (for inference)."""
    tensors, meta = read_checkpoint(path)
    cfg = GeneratorConfig.from_dict(json.loads(meta["generator_config"]))
    g = build_generator(cfg)
    _load_module(g, "generator", tensors)
    g.eval()
    return g


# -- evaluation --------------------------------------------------------------

@dataclass
class MetricsReport:
    rows: list[dict]
    psnr: float
    ssim: float
    rmse: float

    def as_dict(self) -> dict[str, float]:
        return {"psnr": self.psnr, "ssim": self.ssim, "rmse": self.rmse}

    def table(self) -> str:
        lines = [f"{'id':<24}{'psnr':>10}{'ssim':>10}{'rmse':>10}"]
        for r in self.rows:
            lines.append(f"{r['id']:<24}{r['psnr']:>10.4f}{r['ssim']:>10.4f}{r['rmse']:>10.4f}")
        lines.append(f"{'mean':<24}{self.psnr:>10.4f}{self.ssim:>10.4f}{self.rmse:>10.4f}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        txt = out_dir / f"{stem}.txt"
        kv = out_dir / f"{stem}.kv"
        txt.write_text(self.table())
        kv.write_text("".join(f"{k}={v!r}\n" for k, v in self.as_dict().items()))
        return txt, kv


def image_grid(columns: list[list[torch.Tensor]]) -> Image.Image:
    """Rows of equally sized (3, H, W) images; ``columns[i]`` is row i."""
    rows = [np.concatenate([denormalize(t).transpose(1, 2, 0) for t in row], axis=1) for row in columns]
    return Image.fromarray(np.concatenate(rows, axis=0))


@torch.no_grad()
def evaluate(generator: Callable, pairs: Sequence[ImagePair], grid_path=None, max_grid_rows: int = 16) -> MetricsReport:
    """Average PSNR/SSIM/RMSE over ``pairs``; optionally write a source|generated|target grid."""
    if not pairs:
        raise InputError("cannot evaluate on an empty dataset")
    if isinstance(generator, torch.nn.Module):
        was_training = generator.training
        generator.eval()
    rows, grid = [], []
    for p in pairs:
        fake = generator(p.source.unsqueeze(0))[0]
        rows.append({"id": p.id, "psnr": psnr(fake, p.target), "ssim": ssim(fake, p.target), "rmse": rmse(fake, p.target)})
        if len(grid) < max_grid_rows:
            grid.append([p.source, fake.detach(), p.target])
    if isinstance(generator, torch.nn.Module) and was_training:
        generator.train()
    if grid_path is not None:
        Path(grid_path).parent.mkdir(parents=True, exist_ok=True)
        image_grid(grid).save(grid_path)
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim", "rmse")}
    return MetricsReport(rows, **mean)
