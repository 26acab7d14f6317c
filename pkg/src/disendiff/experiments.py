"""Seeded personalization tasks, the calibration ablation matrix, and a result cache."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from .calibration import CalibrationConfig
from .checkpoint import cfg_path, file_hash, load_model, save_model
from .evaluation import MetricsReport, FamilyMetrics, eval_disentanglement
from .scenes import PALETTE, SceneSpec, random_scene
from .tokens import CLASS_NOUNS
from .train import PersonalizationTask, TrainConfig, pretrain, personalize
from .unet import Denoiser, DenoiserConfig

log = logging.getLogger(__name__)

DEFAULT_VARIANTS = ("full", "no-bind", "no-ss", "separate-only", "no-suppress", "double-suppress",
                    "no-gaussian")
OPTIONAL_VARIANTS = ("all-scales", "train-wq")
BASELINE = "no-calibration"
SUITE_SEEDS = (0, 1, 2, 3, 4)


def variant_config(name: str) -> tuple[CalibrationConfig, bool]:
    """(calibration config, train_wq) for a named ablation variant."""
    full = CalibrationConfig()
    table = {
        "full": full,
        "no-bind": dataclasses.replace(full, use_bind=False),
        "no-ss": dataclasses.replace(full, use_ss=False),
        "separate-only": dataclasses.replace(full, separate_only=True),
        "no-suppress": dataclasses.replace(full, suppression_count=0),
        "double-suppress": dataclasses.replace(full, suppression_count=2),
        "no-gaussian": dataclasses.replace(full, use_gaussian=False),
        "all-scales": dataclasses.replace(full, resolution="all"),
        "train-wq": full,
        BASELINE: CalibrationConfig.disabled(),
    }
    if name not in table:
        raise KeyError(f"unknown variant {name!r}; choose from {sorted(table)}")
    return table[name], name == "train-wq"


def task_for_seed(seed: int) -> PersonalizationTask:
    """Two distinct, differently coloured concepts with a clear gap between them."""
    rng = np.random.default_rng(10_000 + seed)
    classes = [str(c) for c in rng.choice(CLASS_NOUNS, 2, replace=False)]
    colors = rng.choice(list(PALETTE), 2, replace=False)
    spec = random_scene(rng, classes, gap=3.0)
    insts = [dataclasses.replace(inst, color=PALETTE[k], stripes=bool(rng.random() < 0.3))
             for inst, k in zip(spec.instances, colors)]
    return PersonalizationTask.from_scene(SceneSpec(insts, spec.background))


def _digest(obj) -> str:
    return hashlib.sha1(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclasses.dataclass
class RunResult:
    variant: str
    seed: int
    attn_iou: float
    leakage: float
    presence: float
    color_error: float
    combined_presence: float
    seconds: float
    report: MetricsReport

    def row(self) -> dict:
        return {k: getattr(self, k) for k in
                ("variant", "seed", "attn_iou", "leakage", "presence", "color_error", "combined_presence",
                 "seconds")}

    def to_json(self) -> str:
        d = self.row()
        d["report"] = [dataclasses.asdict(r) for r in self.report.rows]
        return json.dumps(d, indent=1)

    @classmethod
    def from_json(cls, text: str) -> RunResult:
        d = json.loads(text)
        rows = [FamilyMetrics(**r) for r in d.pop("report")]
        return cls(report=MetricsReport(rows), **d)


def summarize(variant: str, seed: int, report: MetricsReport, seconds: float) -> RunResult:
    concept = [r for r in report.rows if r.family.startswith("concept")]
    return RunResult(
        variant=variant, seed=seed,
        attn_iou=float(np.mean([r.attn_iou for r in report.rows])),
        leakage=float(np.mean([r.leakage for r in concept])),
        presence=float(np.mean([r.presence for r in concept])),
        color_error=float(np.nanmean([r.color_error for r in concept]))
        if any(np.isfinite(r.color_error) for r in concept) else math.nan,
        combined_presence=report.family("combined").presence,
        seconds=seconds, report=report)


class Runner:
    """Personalize-and-evaluate runs keyed by checkpoint hash, variant and seed, cached as JSON."""

    def __init__(self, pretrained_path, cache_dir, n_samples: int = 16, steps: int = 50,
                 guidance: float = 6.0, train_cfg: TrainConfig | None = None):
        self.pretrained_path = Path(pretrained_path)
        self.cache_dir = Path(cache_dir)
        self.n_samples, self.steps, self.guidance = n_samples, steps, guidance
        self.train_cfg = train_cfg or TrainConfig()
        self._model: Denoiser | None = None
        self._hash: str | None = None

    @property
    def model(self) -> Denoiser:
        if self._model is None:
            self._model = load_model(self.pretrained_path)
        return self._model

    @property
    def checkpoint_hash(self) -> str:
        if self._hash is None:
            self._hash = file_hash(self.pretrained_path)
        return self._hash

    def key(self, variant: str, seed: int) -> str:
        cal, wq = variant_config(variant)
        cfg = dataclasses.replace(self.train_cfg, calibration=cal, train_wq=wq, seed=seed)
        return _digest({"ckpt": self.checkpoint_hash, "train": cfg.to_flat(), "n": self.n_samples,
                        "steps": self.steps, "g": self.guidance})

    def cache_path(self, variant: str, seed: int) -> Path:
        return self.cache_dir / f"{variant}_s{seed}_{self.key(variant, seed)}.json"

    def run(self, variant: str, seed: int, use_cache: bool = True) -> RunResult:
        path = self.cache_path(variant, seed)
        if use_cache and path.exists():
            return RunResult.from_json(path.read_text())
        cal, wq = variant_config(variant)
        cfg = dataclasses.replace(self.train_cfg, calibration=cal, train_wq=wq, seed=seed)
        task = task_for_seed(seed)
        t0 = time.time()
        tuned = personalize(self.model, task, cfg).model
        report = eval_disentanglement(tuned, task, self.n_samples, seed=seed, steps=self.steps,
                                      guidance=self.guidance)
        result = summarize(variant, seed, report, time.time() - t0)
        log.info("%s seed %d: attn %.3f leak %.3f presence %.3f (%.0fs)", variant, seed, result.attn_iou,
                 result.leakage, result.presence, result.seconds)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(result.to_json())
        return result

    def suite(self, variants, seeds=SUITE_SEEDS) -> list[RunResult]:
        return [self.run(v, s) for v in variants for s in seeds]


def ensure_pretrained(path, cfg: TrainConfig | None = None, model_cfg: DenoiserConfig | None = None,
                      steps: int | None = None) -> Path:
    """Return ``path``, training and saving the base model there first if it does not exist."""
    path = Path(path)
    if not path.exists():
        cfg = cfg or TrainConfig()
        model = Denoiser.create(model_cfg or DenoiserConfig(), seed=cfg.seed)
        partial = path.with_name(path.name + ".partial")
        result = pretrain(model, cfg, steps=steps, checkpoint_path=partial, checkpoint_every=1000)
        save_model(path, result.model)
        for p in (partial, cfg_path(partial)):
            p.unlink(missing_ok=True)
        log.info("pretrained: val mse %.4f -> %.4f (zero baseline %.4f)", result.val_mse_init,
                 result.val_mse_final, result.zero_baseline)
    return path


def aggregate(results: list[RunResult]) -> dict[str, dict[str, float]]:
    """Per-variant means over seeds."""
    out: dict[str, dict[str, float]] = {}
    for v in dict.fromkeys(r.variant for r in results):
        rs = [r for r in results if r.variant == v]
        out[v] = {k: float(np.nanmean([getattr(r, k) for r in rs]))
                  for k in ("attn_iou", "leakage", "presence", "color_error", "combined_presence")}
        out[v]["seeds"] = len(rs)
    return out
