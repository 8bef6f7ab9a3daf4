"""Command line: train, translate, evaluate, edges, ablate, synth.

Exit codes: 0 success, 2 invalid configuration or unreadable input,
3 non-finite loss during training.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import torch

from .config import RunConfig
from .data import IMAGE_SUFFIXES, load_dataset, load_image, synthetic_dataset, to_image, write_paired_folder
from .edges import apply_threshold, edge_histogram, gaussian_blur, max_entropy_threshold, sobel_magnitude, to_grayscale
from .errors import ConfigError, InputError, TrainingError
from .generator import count_parameters
from .training import (
    evaluate,
    fit,
    init_state,
    load_checkpoint,
    load_generator,
    read_checkpoint,
    save_checkpoint,
    write_loss_csv,
)

log = logging.getLogger("cshnet")

EXIT_OK, EXIT_CONFIG, EXIT_NONFINITE = 0, 2, 3


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "out", None):
        out["output.dir"] = args.out
    if getattr(args, "steps", None) is not None:
        out["train.steps"] = args.steps
    if getattr(args, "seed", None) is not None:
        out["train.seed"] = args.seed
    return out


def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config, _overrides(args))


def _save_map(t: torch.Tensor, path: Path):
    """Write a non-negative 2-D map as 8-bit grayscale, scaled by its maximum."""
    a = t.detach().double()
    m = float(a.max())
    a = a / m if m > 0 else a
    to_image((a * 2 - 1).unsqueeze(0)).save(path)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_dataset(cfg.dataset)
    if args.checkpoint:
        state = load_checkpoint(args.checkpoint, expected_config=cfg.generator)
        # optimiser settings come from the checkpoint; only the run length may change
        state.train_config = replace(state.train_config, steps=cfg.train.steps, epochs=cfg.train.epochs)
    else:
        state = init_state(cfg.generator, cfg.train, cfg.discriminator)
    state.dataset_config = {k: (v.value if hasattr(v, "value") else v) for k, v in asdict(cfg.dataset).items()}
    total = cfg.train.total_steps(len(train))
    ckpt_dir = out / "checkpoints"

    def on_step(s):
        if cfg.checkpoint_every and s.step % cfg.checkpoint_every == 0:
            save_checkpoint(s, ckpt_dir / f"step_{s.step:06d}.safetensors")

    log.info("training %s for %d steps on %d pairs", cfg.generator.bottleneck_variant.value, total, len(train))
    fit(state, train, total, on_step)
    save_checkpoint(state, out / "checkpoint.safetensors")
    write_loss_csv(state.history, out / "losses.csv")
    if test:
        report = evaluate(state.generator, test, out / "grid.png")
        report.write(out)
        print(report.table(), end="")
    return EXIT_OK


def _images_in(d: Path) -> list[Path]:
    if not d.is_dir():
        raise InputError(f"input directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def cmd_translate(args) -> int:
    g = load_generator(args.checkpoint)
    _, meta = read_checkpoint(args.checkpoint)
    size = (json.loads(meta.get("dataset_config", "null")) or {}).get("size")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for path in _images_in(Path(args.input)):
            x = load_image(path, size).unsqueeze(0)
            to_image(g(x)[0]).save(out / f"{path.stem}.png")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    _, test = load_dataset(cfg.dataset)
    g = load_generator(args.checkpoint)
    report = evaluate(g, test, cfg.output_dir / "eval_grid.png")
    report.write(cfg.output_dir, "eval_metrics")
    print(report.table(), end="")
    return EXIT_OK


def cmd_edges(args) -> int:
    img = load_image(args.image).unsqueeze(0)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    gray = to_grayscale(img.double())[0]
    blurred = gaussian_blur(gray, args.kernel, args.sigma)
    mag = sobel_magnitude(blurred)
    t = max_entropy_threshold(edge_histogram(mag))
    thresholded = apply_threshold(mag, t)
    to_image((gray * 2 - 1).unsqueeze(0)).save(f"{prefix}_gray.png")
    to_image((blurred * 2 - 1).unsqueeze(0)).save(f"{prefix}_blur.png")
    _save_map(mag, Path(f"{prefix}_sobel.png"))
    _save_map(thresholded, Path(f"{prefix}_threshold.png"))
    print(f"threshold={t}")
    return EXIT_OK


ABLATION_COLUMNS = ("variant", "igc", "aepl", "params", "psnr", "ssim", "rmse")


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    train, test = load_dataset(cfg.dataset)
    if not test:
        raise ConfigError("dataset.test_count must be >= 1 for ablation")
    steps = args.steps if args.steps is not None else cfg.ablate_steps
    rows = []
    for variant in cfg.ablate_variants:
        for form in cfg.ablate_igc_forms:
            for use_aepl in cfg.ablate_aepl:
                gen = replace(cfg.generator, bottleneck_variant=variant, igc_form=form)
                weights = cfg.train.weights if use_aepl else replace(cfg.train.weights, aepl=0.0)
                tc = replace(cfg.train, weights=weights, steps=steps)
                state = init_state(gen, tc, cfg.discriminator)
                log.info("ablation %s igc=%s aepl=%s: %d steps", variant, form, use_aepl, steps)
                fit(state, train, steps)
                report = evaluate(state.generator, test)
                rows.append({"variant": variant, "igc": form, "aepl": "on" if use_aepl else "off",
                             "params": count_parameters(state.generator), **report.as_dict()})
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    lines = [f"{'variant':<10}{'igc':<6}{'aepl':<6}{'params':>10}{'psnr':>10}{'ssim':>10}{'rmse':>10}"]
    for r in rows:
        lines.append(f"{r['variant']:<10}{r['igc']:<6}{r['aepl']:<6}{r['params']:>10}"
                     f"{r['psnr']:>10.4f}{r['ssim']:>10.4f}{r['rmse']:>10.4f}")
    table = "\n".join(lines) + "\n"
    (out / "ablation.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.config:
        cfg = _load_config(args)
        spec, out = cfg.dataset, cfg.output_dir
        seed, count, size = spec.seed, spec.count, spec.size
    else:
        if not args.out:
            raise ConfigError("synth needs --config or --out")
        out, seed, count, size = Path(args.out), args.seed or 0, args.count, args.size
    root = write_paired_folder(synthetic_dataset(seed, count, size), out)
    print(f"wrote {count} pairs to {root}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cshnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML run configuration")
        sp.add_argument("--out", help="override output.dir")
        sp.add_argument("--steps", type=int, help="override train.steps")
        sp.add_argument("--seed", type=int, help="override train.seed")

    sp = sub.add_parser("train", help="train a generator")
    common(sp)
    sp.add_argument("--checkpoint", help="resume from this checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("translate", help="run a trained generator over a folder of images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True, help="folder of source images")
    sp.add_argument("--out", required=True, help="output folder")
    sp.set_defaults(func=cmd_translate)

    sp = sub.add_parser("evaluate", help="PSNR/SSIM/RMSE of a checkpoint on the test split")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("edges", help="dump the edge-loss pipeline stages of one image")
    sp.add_argument("image")
    sp.add_argument("--out", required=True, help="output path prefix")
    sp.add_argument("--sigma", type=float, default=1.0)
    sp.add_argument("--kernel", type=int, default=5)
    sp.set_defaults(func=cmd_edges)

    sp = sub.add_parser("ablate", help="short training runs over bottleneck/IGC/AEPL variants")
    common(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("synth", help="write the synthetic dataset as paired folders")
    common(sp, config_required=False)
    sp.add_argument("--count", type=int, default=64)
    sp.add_argument("--size", type=int, default=64)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"error: {exc}; snapshot={exc.snapshot}", file=sys.stderr)
        return EXIT_NONFINITE


if __name__ == "__main__":
    sys.exit(main())
