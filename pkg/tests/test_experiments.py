import math

import numpy as np
import pytest

from disendiff.calibration import CalibrationConfig
from disendiff.checkpoint import save_model
from disendiff.experiments import (BASELINE, DEFAULT_VARIANTS, OPTIONAL_VARIANTS, RunResult, Runner, aggregate,
                                   summarize, task_for_seed, variant_config)
from disendiff.evaluation import FamilyMetrics, MetricsReport
from disendiff.scenes import render_scene
from disendiff.train import TrainConfig
from disendiff.unet import Denoiser, DenoiserConfig

TINY = DenoiserConfig(base_channels=8, time_embed_dim=16, embed_dim=8, groups=4)


def test_variant_table():
    assert len(DEFAULT_VARIANTS) == 7
    full, wq = variant_config("full")
    assert full == CalibrationConfig() and not wq
    assert not variant_config("no-bind")[0].use_bind
    assert not variant_config("no-ss")[0].use_ss
    assert variant_config("separate-only")[0].separate_only
    assert variant_config("no-suppress")[0].suppression_count == 0
    assert variant_config("double-suppress")[0].suppression_count == 2
    assert not variant_config("no-gaussian")[0].use_gaussian
    assert variant_config("all-scales")[0].resolution == "all"
    assert variant_config("train-wq") == (full, True)
    assert not variant_config(BASELINE)[0].active
    for v in DEFAULT_VARIANTS + OPTIONAL_VARIANTS:
        # each variant differs from the full method in exactly one knob
        cal, wq = variant_config(v)
        diff = [k for k in vars(full) if getattr(cal, k) != getattr(full, k)] + (["train_wq"] if wq else [])
        assert len(diff) == (0 if v == "full" else 1), v
    with pytest.raises(KeyError):
        variant_config("nope")


@pytest.mark.parametrize("seed", range(5))
def test_seeded_tasks(seed):
    a, b = task_for_seed(seed), task_for_seed(seed)
    assert a.classes == b.classes and a.target_image.tobytes() == b.target_image.tobytes()
    assert len(a.classes) == 2 and len(set(a.classes)) == 2
    spec = a.scene_truth
    spec.validate()
    assert spec.instances[0].color != spec.instances[1].color
    np.testing.assert_array_equal(render_scene(spec), a.target_image)


def _report(attn=(0.4, 0.5, 0.3), leak=(0.0, 0.25, 0.5)):
    fams = ("combined", "concept1", "concept2")
    return MetricsReport([FamilyMetrics(f, "p", 4, 1.0 - l, l, 0.1, a) for f, a, l in zip(fams, attn, leak)])


def test_summarize_and_json_round_trip():
    r = summarize("full", 3, _report(), 12.0)
    assert r.attn_iou == pytest.approx(0.4)
    assert r.leakage == pytest.approx(0.375)
    assert r.presence == pytest.approx(0.625)
    assert r.combined_presence == 1.0
    again = RunResult.from_json(r.to_json())
    assert again == r


def test_aggregate_means_over_seeds():
    rs = [summarize("full", 0, _report(leak=(0, 0, 0)), 1), summarize("full", 1, _report(leak=(0, 1, 1)), 1),
          summarize("no-gaussian", 0, _report(), 1)]
    agg = aggregate(rs)
    assert list(agg) == ["full", "no-gaussian"]
    assert agg["full"]["leakage"] == 0.5 and agg["full"]["seeds"] == 2
    assert agg["no-gaussian"]["seeds"] == 1


def test_runner_runs_and_caches(tmp_path):
    ckpt = tmp_path / "tiny.dsdf"
    save_model(ckpt, Denoiser.create(TINY, seed=0))
    cfg = TrainConfig(personalize_steps=1, batch_size=2, reg_set_size=2)
    runner = Runner(ckpt, tmp_path / "cache", n_samples=1, steps=2, train_cfg=cfg)
    first = runner.run("full", 0)
    assert runner.cache_path("full", 0).exists()
    assert [r.family for r in first.report.rows] == ["combined", "concept1", "concept2"]
    assert 0 <= first.attn_iou <= 1 and not math.isnan(first.attn_iou)
    assert runner.run("full", 0).to_json() == first.to_json()
    # the key tracks everything that changes the outcome
    assert runner.key("full", 0) != runner.key("full", 1) != runner.key("no-bind", 0)
    other = Runner(ckpt, tmp_path / "cache", n_samples=2, steps=2, train_cfg=cfg)
    assert other.key("full", 0) != runner.key("full", 0)
