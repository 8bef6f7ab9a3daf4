import csv
import subprocess
import sys

import numpy as np
import pytest
import torch
import yaml
from PIL import Image

from cshnet.cli import main
from cshnet.config import KEYS, RunConfig
from cshnet.data import load_image
from cshnet.edges import edge_histogram, gaussian_blur, sobel_magnitude, to_grayscale
from cshnet.errors import ConfigError
from oracles import naive_entropy_threshold

TINY = {
    "generator.base_width": 4,
    "generator.n_downsample": 2,
    "discriminator.ndf": 4,
    "dataset.size": 32,
    "dataset.count": 4,
    "dataset.test_count": 2,
    "train.steps": 10,
    "output.checkpoint_every": 5,
}


def write_config(path, **extra):
    cfg = {**TINY, **extra}
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = write_config(root / "run.yaml", **{"output.dir": str(root / "out")})
    assert main(["train", "--config", str(cfg)]) == 0
    return root / "out"


# -- configuration ---------------------------------------------------------------

def test_config_defaults_and_overrides(tmp_path):
    cfg = RunConfig.from_mapping({"output.dir": "x"}, {"train.steps": 7})
    assert cfg.train.steps == 7 and cfg.generator.bottleneck_variant.value == "SCB"
    assert cfg.train.weights.feat == 10.0


@pytest.mark.parametrize("raw,needle", [
    ({}, "output.dir"),
    ({"output.dir": "x", "train.lr_typo": 1}, "train.lr_typo"),
    ({"output.dir": "x", "generator.bottleneck_variant": "UNET"}, "bottleneck_variant"),
    ({"output.dir": "x", "train.batch_size": 0}, "batch_size"),
    ({"output.dir": "x", "dataset.size": 36, "generator.n_downsample": 3}, "divisible"),
    ({"output.dir": "x", "train.steps": "many"}, "train.steps"),
    ({"output.dir": "x", "ablate.variants": ["SCB", "XYZ"]}, "ablate.variants"),
])
def test_config_errors_name_the_field(raw, needle):
    with pytest.raises(ConfigError, match=needle.replace(".", r"\.")):
        RunConfig.from_mapping(raw)


def test_schema_keys_are_namespaced():
    assert all("." in k for k in KEYS)


# -- train ----------------------------------------------------------------------

def test_train_writes_outputs(trained):
    for name in ("checkpoint.safetensors", "losses.csv", "grid.png", "metrics.txt", "metrics.kv"):
        assert (trained / name).is_file(), name
    assert sorted(p.name for p in (trained / "checkpoints").iterdir()) == [
        "step_000005.safetensors", "step_000010.safetensors"]
    rows = list(csv.reader(open(trained / "losses.csv")))
    assert rows[0] == ["step", "loss_gan", "loss_feat", "loss_cont", "loss_aepl", "loss_total", "loss_disc"]
    assert len(rows) == 11
    kv = dict(line.split("=") for line in (trained / "metrics.kv").read_text().splitlines())
    assert set(kv) == {"psnr", "ssim", "rmse"}


def test_train_rerun_reproduces_csv(tmp_path, trained):
    cfg = write_config(tmp_path / "run.yaml", **{"output.dir": str(tmp_path / "again")})
    assert main(["train", "--config", str(cfg)]) == 0
    assert (tmp_path / "again" / "losses.csv").read_bytes() == (trained / "losses.csv").read_bytes()


def test_missing_required_field(tmp_path, capsys):
    cfg = write_config(tmp_path / "bad.yaml")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "output.dir" in capsys.readouterr().err


def test_non_finite_loss_exit_code(tmp_path, monkeypatch, capsys):
    import cshnet.training as tr

    monkeypatch.setattr(tr, "aepl_loss", lambda *a, **k: torch.tensor(float("inf")))
    cfg = write_config(tmp_path / "run.yaml", **{"output.dir": str(tmp_path / "out")})
    assert main(["train", "--config", str(cfg)]) == 3
    assert "aepl" in capsys.readouterr().err


def test_train_stays_inside_output_dir(tmp_path, monkeypatch):
    work = tmp_path / "cwd"
    work.mkdir()
    monkeypatch.chdir(work)
    cfg = write_config(tmp_path / "run.yaml", **{"output.dir": str(tmp_path / "out"), "train.steps": 2})
    before = set(tmp_path.iterdir())
    assert main(["train", "--config", str(cfg)]) == 0
    assert set(tmp_path.iterdir()) - before == {tmp_path / "out"}
    assert not any(work.iterdir())


def test_resume_from_checkpoint(tmp_path, trained):
    cfg = write_config(tmp_path / "run.yaml", **{"output.dir": str(tmp_path / "resumed"), "train.steps": 5,
                                                 "output.checkpoint_every": 0})
    assert main(["train", "--config", str(cfg)]) == 0
    cfg = write_config(tmp_path / "run.yaml", **{"output.dir": str(tmp_path / "resumed"), "train.steps": 10,
                                                 "output.checkpoint_every": 0})
    assert main(["train", "--config", str(cfg), "--checkpoint",
                 str(tmp_path / "resumed" / "checkpoint.safetensors")]) == 0
    assert (tmp_path / "resumed" / "losses.csv").read_bytes() == (trained / "losses.csv").read_bytes()


# -- translate / evaluate ------------------------------------------------------------

def _inputs(root, k=3):
    root.mkdir()
    for i in range(k):
        Image.fromarray(np.full((20, 24, 3), 40 * i, dtype=np.uint8)).save(root / f"img{i}.png")
    return root


def test_translate(tmp_path, trained):
    src = _inputs(tmp_path / "in")
    ckpt = str(trained / "checkpoint.safetensors")
    assert main(["translate", "--checkpoint", ckpt, "--input", str(src), "--out", str(tmp_path / "o1")]) == 0
    assert main(["translate", "--checkpoint", ckpt, "--input", str(src), "--out", str(tmp_path / "o2")]) == 0
    outs = sorted((tmp_path / "o1").iterdir())
    assert [p.name for p in outs] == ["img0.png", "img1.png", "img2.png"]
    for p in outs:
        im = Image.open(p)
        assert im.mode == "RGB" and im.size == (32, 32)
        assert p.read_bytes() == (tmp_path / "o2" / p.name).read_bytes()


def test_translate_unreadable_checkpoint(tmp_path):
    bad = tmp_path / "bad.safetensors"
    bad.write_bytes(b"nope")
    src = _inputs(tmp_path / "in")
    assert main(["translate", "--checkpoint", str(bad), "--input", str(src), "--out", str(tmp_path / "o")]) == 2


def test_evaluate_command(tmp_path, trained, capsys):
    cfg = write_config(tmp_path / "run.yaml", **{"output.dir": str(tmp_path / "eval")})
    assert main(["evaluate", "--config", str(cfg), "--checkpoint", str(trained / "checkpoint.safetensors")]) == 0
    assert (tmp_path / "eval" / "eval_metrics.kv").is_file()
    assert "mean" in capsys.readouterr().out


# -- edges ------------------------------------------------------------------------

def _edge_stages(prefix):
    return [f"{prefix}_{s}.png" for s in ("gray", "blur", "sobel", "threshold")]


def test_edges_constant_image(tmp_path, capsys):
    img = tmp_path / "flat.png"
    Image.fromarray(np.full((16, 16, 3), 90, dtype=np.uint8)).save(img)
    assert main(["edges", str(img), "--out", str(tmp_path / "e" / "flat")]) == 0
    assert capsys.readouterr().out.strip() == "threshold=0"
    for f in _edge_stages(tmp_path / "e" / "flat"):
        assert Image.open(f).mode == "L"


def test_edges_threshold_matches_oracle(tmp_path, capsys, trained):
    img = next((trained.parent / "out").glob("grid.png"))
    assert main(["edges", str(img), "--out", str(tmp_path / "g")]) == 0
    printed = int(capsys.readouterr().out.strip().split("=")[1])
    x = load_image(img).unsqueeze(0).double()
    mag = sobel_magnitude(gaussian_blur(to_grayscale(x)[0]))
    assert printed == naive_entropy_threshold(edge_histogram(mag).counts)[0]
    assert all((tmp_path / f"g_{s}.png").is_file() for s in ("gray", "blur", "sobel", "threshold"))


def test_edges_unreadable_image(tmp_path):
    bad = tmp_path / "x.png"
    bad.write_text("text")
    assert main(["edges", str(bad), "--out", str(tmp_path / "x")]) == 2


# -- ablate / synth -------------------------------------------------------------------

def _ablate(tmp_path, variants):
    cfg = write_config(tmp_path / "ab.yaml", **{"output.dir": str(tmp_path / "ab"), "ablate.variants": variants,
                                                "ablate.steps": 1})
    assert main(["ablate", "--config", str(cfg)]) == 0
    return list(csv.DictReader(open(tmp_path / "ab" / "ablation.csv")))


def test_ablate_two_rows(tmp_path):
    rows = _ablate(tmp_path, ["SCB", "GLOBALG9"])
    assert [r["variant"] for r in rows] == ["SCB", "GLOBALG9"]
    assert (tmp_path / "ab" / "ablation.txt").is_file()


def test_ablate_parameter_ordering(tmp_path):
    rows = {r["variant"]: int(r["params"]) for r in _ablate(tmp_path, ["SCB", "GLOBALG9", "SWING9"])}
    assert rows["GLOBALG9"] < rows["SCB"] < rows["SWING9"]


def test_ablate_full_grid(tmp_path):
    cfg = write_config(tmp_path / "ab.yaml", **{"output.dir": str(tmp_path / "ab"), "ablate.variants": ["CES4"],
                                                "ablate.igc_forms": ["NONE", "AX", "XB", "AXB"],
                                                "ablate.aepl": [True, False], "ablate.steps": 1})
    assert main(["ablate", "--config", str(cfg)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "ab" / "ablation.csv")))
    assert [(r["igc"], r["aepl"]) for r in rows] == [(f, a) for f in ("NONE", "AX", "XB", "AXB") for a in ("on", "off")]


def test_synth_writes_folders(tmp_path):
    assert main(["synth", "--out", str(tmp_path / "s"), "--count", "3", "--size", "32"]) == 0
    assert len(list((tmp_path / "s" / "source").iterdir())) == 3
    assert len(list((tmp_path / "s" / "target").iterdir())) == 3


def test_console_script_help():
    out = subprocess.run([sys.executable, "-m", "cshnet.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("train", "translate", "evaluate", "edges", "ablate", "synth"):
        assert cmd in out.stdout
