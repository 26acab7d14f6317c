import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from disendiff.checkpoint import file_hash, save_model
from disendiff.cli import run
from disendiff.config import dump_kv
from disendiff.diffusion import read_ppm
from disendiff.evaluation import FamilyMetrics, MetricsReport
from disendiff.experiments import DEFAULT_VARIANTS, RunResult, Runner
from disendiff.unet import Denoiser, DenoiserConfig

TINY = DenoiserConfig(base_channels=8, time_embed_dim=16, embed_dim=8, groups=4)


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.dsdf"
    save_model(path, Denoiser.create(TINY, seed=0))
    return path


def test_unknown_flag_is_usage_error(capsys):
    assert run(["sample", "--prompt", "a disc", "--checkpoint", "x", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err
    assert run(["frobnicate"]) == 2
    assert run([]) == 2


def test_abbreviated_flags_rejected(capsys):
    assert run(["gradcheck", "--see", "1"]) == 2


def test_help_exits_zero(capsys):
    assert run(["--help"]) == 0
    assert "personalize" in capsys.readouterr().out


def test_runtime_failure_is_one_line(tmp_path, capsys):
    code = run(["sample", "--checkpoint", str(tmp_path / "missing.dsdf"), "--prompt", "a disc",
                "--out", str(tmp_path / "x.ppm")])
    err = capsys.readouterr().err
    assert code == 1 and len(err.strip().splitlines()) == 1 and "error" in err


def test_conflicting_calibration_flags(ckpt, tmp_path, capsys):
    code = run(["personalize", "--pretrained", str(ckpt), "--out", str(tmp_path), "--scene-seed", "0",
                "--no-suppress", "--double-suppress"])
    assert code == 2 and "mutually exclusive" in capsys.readouterr().err
    assert run(["personalize", "--pretrained", str(ckpt), "--out", str(tmp_path)]) == 2


def test_sample_is_byte_identical(ckpt, tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name / "s.ppm"
        out.parent.mkdir()
        assert run(["sample", "--checkpoint", str(ckpt), "--prompt", "V1* disc", "--seed", "7", "--steps", "50",
                    "--guidance", "6", "--out", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["config"]["steps"] == 50
    assert manifest["inputs"][str(ckpt)] == file_hash(ckpt)
    assert manifest["outputs"][str(tmp_path / "a" / "s.ppm")] == file_hash(tmp_path / "a" / "s.ppm")


def test_sample_many(ckpt, tmp_path, capsys):
    assert run(["sample", "--checkpoint", str(ckpt), "--prompt", "a ring", "--steps", "2", "--n", "3",
                "--out", str(tmp_path / "r.ppm")]) == 0
    for i in range(3):
        assert read_ppm(tmp_path / f"r_{i:02d}.ppm").shape == (32, 32, 3)


def test_pretrain_command(tmp_path, capsys):
    cfg = tmp_path / "train.cfg"
    dump_kv(cfg, {"pretrain_batch_size": 2, **{f"model.{k}": v for k, v in TINY.to_dict().items()}})
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name / "base.dsdf"
        assert run(["pretrain", "--out", str(out), "--steps", "1", "--config", str(cfg), "--log-every", "0"]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config"]["steps"] == 1 and manifest["config"]["model"]["base_channels"] == 8
    assert "val mse" in capsys.readouterr().out


def test_personalize_eval_inspect_pipeline(ckpt, tmp_path, capsys):
    out = tmp_path / "p"
    assert run(["personalize", "--pretrained", str(ckpt), "--out", str(out), "--scene-seed", "3", "--steps", "2",
                "--batch-size", "2", "--reg-size", "2", "--double-suppress"]) == 0
    for name in ("personalized.dsdf", "train_log.csv", "target.ppm", "task.json", "manifest.json"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["calibration.suppression_count"] == 2
    with (out / "train_log.csv").open() as fh:
        assert len(list(csv.DictReader(fh))) == 2

    ev = tmp_path / "e"
    assert run(["eval", "--checkpoint", str(out / "personalized.dsdf"), "--task", str(out / "task.json"),
                "--samples", "1", "--steps", "2", "--out", str(ev)]) == 0
    lines = (ev / "metrics.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[1].startswith("combined")
    assert len(list(ev.glob("mask_*.pgm"))) == 2

    ia = tmp_path / "i"
    assert run(["inspect-attn", "--checkpoint", str(out / "personalized.dsdf"), "--task", str(out / "task.json"),
                "--out", str(ia), "--t", "100"]) == 0
    names = sorted(p.name for p in ia.glob("attn_*.pgm"))
    assert "attn_modifier(1)_t100.pgm" in names and "attn_class(2)_t100.pgm" in names


def test_personalize_from_image(ckpt, tmp_path, capsys):
    src = tmp_path / "p0"
    assert run(["personalize", "--pretrained", str(ckpt), "--out", str(src), "--scene-seed", "1", "--steps", "1",
                "--batch-size", "2", "--reg-size", "0", "--no-calibration"]) == 0
    out = tmp_path / "p1"
    assert run(["personalize", "--pretrained", str(ckpt), "--out", str(out), "--image", str(src / "target.ppm"),
                "--classes", "disc,ring", "--steps", "1", "--batch-size", "2", "--reg-size", "0"]) == 0
    assert json.loads((out / "task.json").read_text())["classes"] == ["disc", "ring"]
    assert run(["personalize", "--pretrained", str(ckpt), "--out", str(out), "--image",
                str(src / "target.ppm")]) == 2


def test_gradcheck_command(capsys, monkeypatch):
    monkeypatch.delenv("DISENDIFF_PRECISION", raising=False)
    assert run(["gradcheck", "--seeds", "2", "--checks", "l_bind,suppress"]) == 0
    out = capsys.readouterr().out
    assert "l_bind" in out and "f64 analytic" in out
    assert run(["gradcheck", "--checks", "nope"]) == 2
    monkeypatch.setenv("DISENDIFF_PRECISION", "f16")
    assert run(["gradcheck", "--seeds", "1"]) == 2


def _fake_result(variant, seed):
    rows = [FamilyMetrics(f, "p", 1, 0.5, 0.25, 0.1, 0.3) for f in ("combined", "concept1", "concept2")]
    return RunResult(variant, seed, 0.3, 0.25, 0.5, 0.1, 0.5, 0.0, MetricsReport(rows))


def test_ablate_writes_seven_rows_from_cache(ckpt, tmp_path, capsys):
    cache = tmp_path / "cache"
    runner = Runner(ckpt, cache, n_samples=2, steps=3)
    for v in DEFAULT_VARIANTS:
        for s in (0, 1):
            path = runner.cache_path(v, s)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(_fake_result(v, s).to_json())
    out = tmp_path / "abl"
    assert run(["ablate", "--pretrained", str(ckpt), "--out", str(out), "--seeds", "0,1", "--samples", "2",
                "--steps", "3", "--cache", str(cache)]) == 0
    with (out / "ablation.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["variant"] for r in rows] == list(DEFAULT_VARIANTS)
    assert set(rows[0]) == {"variant", "seeds", "attn_iou", "leakage", "presence", "color_error",
                            "combined_presence"}
    assert all(r["seeds"] == "2" for r in rows)
    with (out / "ablation_per_seed.csv").open() as fh:
        assert len(list(csv.DictReader(fh))) == 14
    assert run(["ablate", "--pretrained", str(ckpt), "--out", str(out), "--include", "bogus"]) == 2


def test_console_script_exit_code():
    proc = subprocess.run([sys.executable, "-m", "disendiff.cli", "gradcheck", "--nope"], capture_output=True,
                          text=True)
    assert proc.returncode == 2 and "usage" in proc.stderr
