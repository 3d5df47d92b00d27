"""End-to-end CLI checks on a miniature dataset (fast settings via config)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from imgcloak.cli import main
from imgcloak.imageio import Image, save_image
from imgcloak.manifest import read_manifest

FAST = """
seed = 3
data.identities = 4
data.images_per_identity = 5
data.train_per_identity = 4
data.probe = false
pgd.iterations = 40
pgd.trace_every = 40
attack.epochs = 300
attack.ratios = 0,1
"""


def write_cfg(tmp_path: Path, extra: str = "") -> Path:
    text = FAST + f"dataset.root = {tmp_path / 'data'}\n"
    text += f"output.dir = {tmp_path / 'out'}\n" + extra
    cfg = tmp_path / "run.cfg"
    cfg.write_text(text)
    return cfg


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(tmp)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    return tmp, cfg


def test_gen_data_outputs(workspace):
    tmp, _ = workspace
    manifest = read_manifest(tmp / "data" / "manifest.csv")
    assert len(manifest.entries) == 20
    assert (tmp / "data" / "config.txt").exists()


def test_protect_then_evaluate(workspace):
    tmp, cfg = workspace
    assert main(["protect", "--config", str(cfg)]) == 0
    out = tmp / "out" / "protect"
    manifest = read_manifest(out / "manifest.csv")
    assert sum(e.protected for e in manifest.entries) == 16
    lines = (out / "diagnostics.jsonl").read_text().splitlines()
    assert len(lines) == 16
    diag = json.loads(lines[0])
    assert set(diag) >= {"path", "final_loss", "final_cos_base", "linf", "psnr"}
    assert "wall" not in " ".join(diag)
    assert (out / "config.txt").exists()
    assert (out / "encoder_params.json").exists()

    assert main(["evaluate", "--config", str(cfg)]) == 0
    ev = tmp / "out" / "evaluate"
    for name in ("gfds.json", "gfds.csv", "pca_coords.csv", "robustness.csv",
                 "gfds_scatter.svg", "gfds_scatter.png", "robustness.svg",
                 "config.txt"):
        assert (ev / name).exists(), name
    rows = (ev / "robustness.csv").read_text().splitlines()
    assert len(rows) == 1 + 7  # header + full table-style sweep


def test_evaluate_identity_only_has_one_row(workspace, tmp_path):
    tmp, _ = workspace
    cfg = write_cfg(tmp_path, extra=(
        f"dataset.protected_manifest = {tmp / 'out' / 'protect' / 'manifest.csv'}\n"
        "evaluate.operations = identity\n"))
    assert main(["evaluate", "--config", str(cfg)]) == 0
    rows = (tmp_path / "out" / "evaluate" / "robustness.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].startswith("identity,")


def test_protect_is_byte_reproducible(workspace, tmp_path):
    tmp, _ = workspace
    cfg = write_cfg(tmp_path, extra=f"output.dir = {tmp_path / 'rep'}\n")
    text = cfg.read_text().replace(f"dataset.root = {tmp_path / 'data'}",
                                   f"dataset.root = {tmp / 'data'}")
    cfg.write_text(text)
    trees = []
    for _ in range(2):
        assert main(["protect", "--config", str(cfg)]) == 0
        trees.append(tree_bytes(tmp_path / "rep" / "protect"))
    assert trees[0].keys() == trees[1].keys()
    assert [k for k in trees[0] if trees[0][k] != trees[1][k]] == []


def test_simulate_attack_outputs_and_reproducibility(workspace, tmp_path):
    tmp, _ = workspace
    cfg = write_cfg(tmp_path, extra=f"output.dir = {tmp_path / 'sim'}\n")
    text = cfg.read_text().replace(f"dataset.root = {tmp_path / 'data'}",
                                   f"dataset.root = {tmp / 'data'}")
    cfg.write_text(text)
    trees = []
    for _ in range(2):
        assert main(["simulate-attack", "--config", str(cfg)]) == 0
        out = tmp_path / "sim" / "attack"
        rows = (out / "attack_sweep.csv").read_text().splitlines()
        assert len(rows) == 3  # header + 2 ratios
        assert (out / "attack_sweep.svg").exists()
        trees.append(tree_bytes(out))
    assert trees[0] == trees[1]


def test_ratio_zero_flag_override(workspace, tmp_path):
    tmp, _ = workspace
    cfg = write_cfg(tmp_path)
    text = cfg.read_text().replace(f"dataset.root = {tmp_path / 'data'}",
                                   f"dataset.root = {tmp / 'data'}")
    cfg.write_text(text)
    assert main(["protect", "--config", str(cfg), "--ratio", "0",
                 "--out", str(tmp_path / "zero")]) == 0
    manifest = read_manifest(tmp_path / "zero" / "protect" / "manifest.csv")
    assert sum(e.protected for e in manifest.entries) == 0


def test_protect_missing_image_exits_one(workspace, tmp_path):
    tmp, _ = workspace
    data = tmp_path / "data"
    data.mkdir()
    (data / "images").mkdir()
    src = read_manifest(tmp / "data" / "manifest.csv")
    import shutil
    for e in src.entries:
        shutil.copyfile(src.image_path(e), data / e.path)
    text = (tmp / "data" / "manifest.csv").read_text()
    (data / "manifest.csv").write_text(text)
    (data / src.entries[0].path).unlink()
    cfg = write_cfg(tmp_path, extra=f"dataset.root = {data}\n")
    assert main(["protect", "--config", str(cfg)]) == 1


def test_inspect_reports_metrics(tmp_path, capsys):
    rng = np.random.default_rng(0)
    base = rng.uniform(0.2, 0.7, size=(32, 32, 3))
    a = Image(base)
    b = Image(base + 8 / 255)
    save_image(a, tmp_path / "a.png")
    save_image(b, tmp_path / "b.png")
    assert main(["inspect", str(tmp_path / "a.png"), str(tmp_path / "b.png")]) == 0
    out = capsys.readouterr().out
    assert "linf" in out and "psnr_db" in out and "embed_cos" in out
    assert main(["inspect", str(tmp_path / "a.png"), str(tmp_path / "a.png")]) == 0
    out = capsys.readouterr().out
    assert "linf      0.0" in out
    assert "embed_cos 1.0" in out


def test_inspect_flat_images_degrade_gracefully(tmp_path, capsys):
    save_image(Image(np.full((32, 32, 3), 0.5)), tmp_path / "flat.png")
    assert main(["inspect", str(tmp_path / "flat.png"),
                 str(tmp_path / "flat.png")]) == 0
    assert "degenerate" in capsys.readouterr().out


def test_inspect_size_mismatch_exits_two(tmp_path):
    save_image(Image(np.zeros((32, 32, 3))), tmp_path / "a.png")
    save_image(Image(np.zeros((16, 16, 3))), tmp_path / "b.png")
    assert main(["inspect", str(tmp_path / "a.png"), str(tmp_path / "b.png")]) == 2


def test_bad_config_exits_two(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense.key = 1\n")
    assert main(["protect", "--config", str(bad)]) == 2
    assert main(["protect", "--config", str(tmp_path / "missing.cfg")]) == 2
