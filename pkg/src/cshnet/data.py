"""Paired datasets: a synthetic sketch -> textured-shapes task and aligned image folders."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .edges import sobel_magnitude
from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
GRID = 3  # shapes live in distinct cells of a GRID x GRID layout, so they never overlap
EDGE_LEVEL = 0.25  # sketch keeps Sobel responses above this fraction of the maximum
# fill colours depend on the shape kind (plus jitter) so the sketch -> image map is learnable
PALETTE = {"rectangle": np.array([200, 60, 50]), "ellipse": np.array([60, 180, 70]),
           "polyline": np.array([240, 210, 60])}
BACKGROUND = (np.array([40, 50, 110]), np.array([150, 170, 220]))
JITTER = 30


class DatasetKind(str, enum.Enum):
    SYNTHETIC = "SYNTHETIC"
    FOLDER = "FOLDER"


@dataclass(frozen=True)
class DatasetSpec:
    kind: DatasetKind = DatasetKind.SYNTHETIC
    size: int = 64
    count: int = 64
    seed: int = 0
    root: str | None = None
    test_count: int = 8

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", DatasetKind(str(getattr(self.kind, "value", self.kind)).upper()))
        except ValueError:
            raise ConfigError(f"dataset kind must be SYNTHETIC or FOLDER, got {self.kind!r}") from None
        if self.size < 32:
            raise ConfigError(f"dataset size must be >= 32, got {self.size}")
        if self.count < 1:
            raise ConfigError(f"dataset count must be >= 1, got {self.count}")
        if self.test_count < 0:
            raise ConfigError(f"dataset test_count must be >= 0, got {self.test_count}")
        if self.kind is DatasetKind.FOLDER and not self.root:
            raise ConfigError("dataset root is required for FOLDER datasets")

    def check_divisible(self, n_downsample: int):
        if self.size % 2 ** n_downsample:
            raise ConfigError(f"dataset size {self.size} not divisible by 2^{n_downsample}")


@dataclass
class ImagePair:
    source: torch.Tensor  # (3, H, W) in [-1, 1]
    target: torch.Tensor
    id: str
    regions: list[dict] = field(default_factory=list)


def normalize(pixels: np.ndarray) -> np.ndarray:
    """uint8 [0, 255] -> float32 [-1, 1]."""
    return (np.asarray(pixels, dtype=np.float32) / 127.5 - 1.0).astype(np.float32)


def denormalize(x) -> np.ndarray:
    """[-1, 1] -> uint8 [0, 255], rounded."""
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.clip(np.rint((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def to_image(x) -> Image.Image:
    """(3, H, W) or (1, H, W) tensor in [-1, 1] -> PIL image."""
    arr = denormalize(x)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
    return Image.fromarray(arr)


# -- synthetic pairs ---------------------------------------------------------

def _line(r0, c0, r1, c1):
    """Integer Bresenham rasterisation."""
    pts = []
    dr, dc = abs(r1 - r0), -abs(c1 - c0)
    sr, sc = (1 if r0 < r1 else -1), (1 if c0 < c1 else -1)
    err = dr + dc
    while True:
        pts.append((r0, c0))
        if r0 == r1 and c0 == c1:
            return pts
        e2 = 2 * err
        if e2 >= dc:
            err += dc
            r0 += sr
        if e2 <= dr:
            err += dr
            c0 += sc


def _shape_mask(rng, kind, top, left, cell, size):
    m = np.zeros((size, size), dtype=bool)
    margin = max(1, cell // 8)
    lo_r, lo_c = top + margin, left + margin
    hi_r, hi_c = top + cell - margin, left + cell - margin
    if kind == "rectangle":
        h = int(rng.integers(cell // 3, hi_r - lo_r + 1))
        w = int(rng.integers(cell // 3, hi_c - lo_c + 1))
        r = int(rng.integers(lo_r, hi_r - h + 1))
        c = int(rng.integers(lo_c, hi_c - w + 1))
        m[r:r + h, c:c + w] = True
    elif kind == "ellipse":
        ry = int(rng.integers(cell // 6, (hi_r - lo_r) // 2 + 1))
        rx = int(rng.integers(cell // 6, (hi_c - lo_c) // 2 + 1))
        cy = int(rng.integers(lo_r + ry, hi_r - ry + 1))
        cx = int(rng.integers(lo_c + rx, hi_c - rx + 1))
        yy, xx = np.mgrid[0:size, 0:size]
        m = (yy - cy) ** 2 * rx * rx + (xx - cx) ** 2 * ry * ry <= rx * rx * ry * ry
    else:
        thick = max(1, cell // 10)
        n = int(rng.integers(3, 5))
        pts = [(int(rng.integers(lo_r + thick, hi_r - thick)), int(rng.integers(lo_c + thick, hi_c - thick)))
               for _ in range(n)]
        for (r0, c0), (r1, c1) in zip(pts, pts[1:]):
            for r, c in _line(r0, c0, r1, c1):
                m[max(r - thick, top):r + thick + 1, max(c - thick, left):c + thick + 1] = True
    return m


def _sketch(target: np.ndarray) -> np.ndarray:
    """Binarized Sobel edges of a (3, H, W) [-1, 1] image, replicated to 3 channels."""
    gray = torch.from_numpy(0.299 * target[0] + 0.587 * target[1] + 0.114 * target[2]).double()
    mag = sobel_magnitude((gray + 1) / 2).numpy()
    edges = mag > EDGE_LEVEL * mag.max()
    sketch = np.where(edges, -1.0, 1.0).astype(np.float32)
    return np.repeat(sketch[None], 3, axis=0)


def synth_pair(seed: int, index: int, size: int = 64) -> ImagePair:
    """Deterministic (sketch, textured shapes) pair for ``(seed, index)``."""
    rng = np.random.default_rng([seed, index])
    yy, xx = np.mgrid[0:size, 0:size]

    c0 = BACKGROUND[0] + rng.integers(-JITTER, JITTER + 1, 3)
    c1 = BACKGROUND[1] + rng.integers(-JITTER, JITTER + 1, 3)
    frac = yy / (size - 1)
    img = c0[:, None, None] * (1 - frac) + c1[:, None, None] * frac

    cell = size // GRID
    n = int(rng.integers(3, 7))
    cells = rng.permutation(GRID * GRID)[:n]
    regions = []
    for k in cells:
        top, left = int(k // GRID) * cell, int(k % GRID) * cell
        kind = ("rectangle", "ellipse", "polyline")[int(rng.integers(0, 3))]
        mask = _shape_mask(rng, kind, top, left, cell, size)
        color = np.clip(PALETTE[kind] + rng.integers(-JITTER, JITTER + 1, 3), 0, 255)
        fy, fx = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        phase = int(rng.integers(0, 360))
        wave = np.sin(2 * np.pi * (fy * yy + fx * xx) / cell + np.deg2rad(phase))
        tex = color[:, None, None] * (0.85 + 0.15 * wave)
        img = np.where(mask[None], tex, img)
        rows, cols = np.nonzero(mask)
        regions.append({"kind": kind, "cell": int(k),
                        "bbox": [int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max())]})

    target = normalize(np.clip(np.rint(img), 0, 255))
    source = _sketch(target)
    return ImagePair(torch.from_numpy(source), torch.from_numpy(target), f"synth-{seed}-{index:05d}", regions)


def synthetic_dataset(seed: int, count: int, size: int = 64, start: int = 0) -> list[ImagePair]:
    return [synth_pair(seed, i, size) for i in range(start, start + count)]


# -- folders -----------------------------------------------------------------

class PairedFolder(Sequence):
    """Filename-matched pairs with a report of the files that had no partner."""

    def __init__(self, pairs: list[ImagePair], skipped: list[str]):
        self.pairs = pairs
        self.skipped = skipped

    def __getitem__(self, i):
        return self.pairs[i]

    def __len__(self):
        return len(self.pairs)


def load_image(path, size: int | None = None) -> torch.Tensor:
    """Decode an 8-bit RGB image, optionally resize (bilinear), return (3, H, W) in [-1, 1]."""
    try:
        img = Image.open(path).convert("RGB")
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return torch.from_numpy(normalize(np.asarray(img)).transpose(2, 0, 1).copy())


def _images(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        raise InputError(f"missing directory {d}")
    return {p.name: p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}


def load_paired_folder(root, size: int) -> PairedFolder:
    root = Path(root)
    src, tgt = _images(root / "source"), _images(root / "target")
    common = sorted(src.keys() & tgt.keys())
    skipped = sorted(src.keys() ^ tgt.keys())
    for name in skipped:
        log.warning("skipping %s: no partner in %s", name, "target" if name in src else "source")
    if not common:
        raise InputError(f"no filename-matched pairs under {root}")
    pairs = [ImagePair(load_image(src[n], size), load_image(tgt[n], size), Path(n).stem) for n in common]
    return PairedFolder(pairs, skipped)


def write_paired_folder(pairs: Sequence[ImagePair], root) -> Path:
    """Write pairs as root/source/<id>.png and root/target/<id>.png."""
    root = Path(root)
    for sub in ("source", "target"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for p in pairs:
        to_image(p.source).save(root / "source" / f"{p.id}.png")
        to_image(p.target).save(root / "target" / f"{p.id}.png")
    return root


def load_dataset(spec: DatasetSpec) -> tuple[list[ImagePair], list[ImagePair]]:
    """(train, test) pairs; test pairs never overlap the training pairs."""
    if spec.kind is DatasetKind.SYNTHETIC:
        train = synthetic_dataset(spec.seed, spec.count, spec.size)
        test = synthetic_dataset(spec.seed, spec.test_count, spec.size, start=spec.count)
        return train, test
    pairs = list(load_paired_folder(spec.root, spec.size))
    if spec.test_count >= len(pairs):
        raise InputError(f"test_count {spec.test_count} leaves no training pairs out of {len(pairs)}")
    cut = len(pairs) - spec.test_count
    return pairs[:cut][:spec.count], pairs[cut:]
