import json

import numpy as np
import pytest

from ganinv import cli
from ganinv.modelio import load_weights, parse_arch_config, read_csv, read_pgm, write_idx_images

TINY_G = """latent_dim=3
image=1x4x4
fc out=8 bn=true act=relu
reshape 2 2 2
conv out=1 k=3 pad=1 up=2 act=sigmoid
"""

TINY_D = """image=1x4x4
conv out=2 k=3 pad=1 bn=true act=leaky_relu:0.2
reshape 32
fc out=1
act sigmoid
"""


@pytest.fixture
def workspace(tmp_path):
    (tmp_path / "g.cfg").write_text(TINY_G)
    (tmp_path / "d.cfg").write_text(TINY_D)
    rng = np.random.default_rng(0)
    imgs = np.zeros((40, 4, 4), dtype=np.uint8)
    imgs[:, 1:3, 1:3] = rng.integers(150, 256, (40, 2, 2))
    write_idx_images(imgs, tmp_path / "images")
    return tmp_path


def run(*argv):
    return cli.main([str(a) for a in argv])


def train_tiny(ws, seed=0, name="g.bin"):
    return run("train", "--arch-g", ws / "g.cfg", "--arch-d", ws / "d.cfg",
               "--data", ws / "images", "--iters", 5, "--batch", 8, "--seed", seed,
               "--out", ws / name)


def test_unknown_subcommand_is_a_usage_error(capsys):
    assert run("frobnicate") == 2
    assert "invalid choice" in capsys.readouterr().err


def test_missing_required_flag_is_a_usage_error():
    assert run("invert", "--weights", "x") == 2


def test_clip_with_gaussian_prior_is_a_usage_error(workspace, capsys):
    assert train_tiny(workspace) == 0
    code = run("invert", "--weights", workspace / "g.bin", "--arch-g", workspace / "g.cfg",
               "--images", workspace / "images", "--prior", "normal:0,1", "--constraint", "clip",
               "--out-dir", workspace / "inv")
    assert code == 2
    assert "clip" in capsys.readouterr().err


def test_missing_weight_file_is_a_runtime_error(workspace):
    code = run("invert", "--weights", workspace / "nope.bin", "--arch-g", workspace / "g.cfg",
               "--images", workspace / "images", "--out-dir", workspace / "inv")
    assert code == 1


def test_gradcheck_passes_on_random_weights(workspace, capsys):
    assert run("gradcheck", "--arch-g", workspace / "g.cfg", "--seed", 3) == 0
    assert "ok" in capsys.readouterr().out


def test_train_writes_weights_losses_and_config(workspace):
    assert train_tiny(workspace) == 0
    cfg = parse_arch_config(TINY_G)
    load_weights(workspace / "g.bin", cfg)
    assert (workspace / "g.bin.disc").exists()
    header, rows = read_csv(workspace / "g.bin.loss.csv")
    assert header == ["iteration", "d_loss", "g_loss"] and len(rows) == 5
    resolved = json.loads((workspace / "g.bin.config.json").read_text())
    assert resolved["iterations"] == 5 and resolved["images"] == 40


def test_training_is_reproducible_from_the_command_line(workspace):
    assert train_tiny(workspace, 4, "a.bin") == 0
    assert train_tiny(workspace, 4, "b.bin") == 0
    assert (workspace / "a.bin").read_bytes() == (workspace / "b.bin").read_bytes()


def test_invert_then_metrics_agree(workspace, capsys):
    assert train_tiny(workspace) == 0
    capsys.readouterr()
    out = workspace / "inv"
    code = run("invert", "--weights", workspace / "g.bin", "--arch-g", workspace / "g.cfg",
               "--images", workspace / "images", "--count", 6, "--offset", 2, "--iters", 30,
               "--out-dir", out)
    assert code == 0
    printed = capsys.readouterr().out
    header, z = read_csv(out / "z_star.csv")
    assert header == ["z0", "z1", "z2"] and len(z) == 6
    _, mae = read_csv(out / "mae.csv")
    assert [int(r[0]) for r in mae] == list(range(2, 8))
    # five (reconstruction, original) pairs per row
    assert read_pgm(out / "pairs.pgm").shape == (2 * 4 + 2, 10 * 4 + 9 * 2)
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["bn"] == "batch" and resolved["constraint"] == "none"

    assert run("metrics", "--targets", workspace / "images", "--recon-dir", out) == 0
    again = capsys.readouterr().out
    assert printed.split(" over")[0] == again.split(" over")[0]


def test_generate_writes_a_grid(workspace):
    assert train_tiny(workspace) == 0
    out = workspace / "samples.pgm"
    assert run("generate", "--weights", workspace / "g.bin", "--arch-g", workspace / "g.cfg",
               "--count", 6, "--columns", 3, "--out", out) == 0
    assert read_pgm(out).shape == (2 * 4 + 2, 3 * 4 + 2 * 2)
    assert run("generate", "--weights", workspace / "g.bin", "--arch-g", workspace / "g.cfg",
               "--count", 1, "--out", out) == 2
