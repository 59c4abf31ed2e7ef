import json
import subprocess
import sys

import pytest

from laekit.checkpoint import load_checkpoint, read_manifest
from laekit.cli import run_cli


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run_cli(["init", "--out", str(root / "cfg.json"), "--steps", "2",
                    "--override", "batch_latents=1", "--override", "weights.sc=0.4"]) == 0
    assert run_cli(["train", "--config", str(root / "cfg.json"), "--out", str(root / "run"), "--seed", "4"]) == 0
    return root


def test_init_writes_overridden_config(run_dir):
    cfg = json.loads((run_dir / "cfg.json").read_text())
    assert cfg["steps"] == 2 and cfg["batch_latents"] == 1 and cfg["weights"]["sc"] == 0.4


def test_flags_roundtrip_into_checkpoint(run_dir):
    ckpt = load_checkpoint(run_dir / "run" / "checkpoint")
    assert ckpt.config["seed"] == 4 and ckpt.config["weights"]["sc"] == 0.4 and ckpt.step == 2


def test_sweep_writes_grid(run_dir):
    out = run_dir / "sweep"
    assert run_cli(["sweep", "--checkpoint", str(run_dir / "run"), "--attr", "blond hair", "--out", str(out)]) == 0
    index = json.loads((out / "index.json").read_text())
    assert len(index["poses"]) == 9 and len(list(out.glob("*.png"))) == 9
    assert {(p["yaw"], p["pitch"]) for p in index["poses"]} >= {(-30.0, -20.0), (0.0, 0.0), (30.0, 20.0)}


def test_sweep_all_attributes(run_dir):
    out = run_dir / "sweep_all"
    assert run_cli(["sweep", "--checkpoint", str(run_dir / "run"), "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["blond_hair", "old", "smile"]


def test_edit_writes_png(run_dir):
    out = run_dir / "edit.png"
    assert run_cli(["edit", "--checkpoint", str(run_dir / "run"), "--attr", "smile", "--yaw", "15", "--out", str(out)]) == 0
    assert out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_inspect_prints_manifest(run_dir, capsys):
    ck = run_dir / "run" / "checkpoint"
    assert run_cli(["inspect", str(ck)]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed == read_manifest(ck)
    assert {e["name"] for e in printed["arrays"]} == set(load_checkpoint(ck).arrays)


def test_eval_writes_report(run_dir):
    out = run_dir / "report.json"
    assert run_cli(["eval", "--checkpoint", str(run_dir / "run"), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert set(report["aa"]) == {"blond hair", "smile", "old"}


def test_identical_invocations_give_identical_artifacts(tmp_path):
    for name in ("a", "b"):
        assert run_cli(["train", "--steps", "2", "--seed", "9", "--override", "batch_latents=1",
                        "--out", str(tmp_path / name)]) == 0
    for rel in ("train_log.jsonl", "checkpoint/manifest.json", "checkpoint/tokens.f32"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_exit_codes(tmp_path, capsys):
    assert run_cli(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err
    assert run_cli([]) == 1
    assert run_cli(["init", "--out", str(tmp_path / "c.json"), "--override", "nokey=1"]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{oops")
    assert run_cli(["train", "--config", str(bad)]) == 1
    assert run_cli(["sweep", "--checkpoint", str(tmp_path / "missing")]) == 2
    assert run_cli(["inspect", str(tmp_path / "missing")]) == 2


def test_corrupt_checkpoint_exit_code(run_dir, tmp_path):
    import shutil

    ck = tmp_path / "ck"
    shutil.copytree(run_dir / "run" / "checkpoint", ck)
    f = ck / "tokens.f32"
    data = bytearray(f.read_bytes())
    data[0] ^= 0xFF
    f.write_bytes(bytes(data))
    assert run_cli(["inspect", str(ck)]) == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "laekit", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "sweep" in proc.stdout
