"""Pretraining of the toy text-to-image model and single-image personalization."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor
from .calibration import CalibrationConfig, calibration_terms
from .diffusion import NoiseSchedule, base_loss, forward_noise
from .scenes import SceneSpec, random_scene, render_scene
from .tokens import CLASS_NOUNS, MODIFIERS, init_modifier_rows, template_prompt, tokenize
from .unet import Denoiser

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "t_drawn", "l_base", "l_bind", "l_ss", "total", "degenerate_map_count")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became {value} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    personalize_steps: int = 250
    batch_size: int = 8
    lr: float = 8e-5
    reg_set_size: int = 200
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    pretrain_steps: int = 20000
    pretrain_batch_size: int = 16
    pretrain_lr: float = 5e-4
    pretrain_warmup: int = 200
    cond_dropout: float = 0.1
    corpus_color_prob: float = 1.0
    corpus_rare_prob: float = 0.1
    grad_clip: float = 1.0
    train_wq: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.personalize_steps < 0 or self.pretrain_steps < 0:
            raise ValueError("step counts must be nonnegative")
        if self.batch_size <= 0 or self.pretrain_batch_size <= 0:
            raise ValueError("batch sizes must be positive")
        if self.lr <= 0 or self.pretrain_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.reg_set_size < 0:
            raise ValueError("reg_set_size must be >= 0")
        if not (0.0 <= self.corpus_color_prob <= 1.0 and 0.0 <= self.corpus_rare_prob <= 1.0):
            raise ValueError("corpus probabilities must lie in [0, 1]")

    def to_flat(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "calibration"}
        for f in fields(self.calibration):
            out[f"calibration.{f.name}"] = getattr(self.calibration, f.name)
        return out

    @classmethod
    def from_flat(cls, values: dict) -> TrainConfig:
        cal = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("calibration.")}
        rest = {k: v for k, v in values.items() if not k.startswith("calibration.")}
        known = {f.name for f in fields(cls)}
        unknown = set(rest) - known
        if unknown:
            raise KeyError(f"unknown training config keys: {sorted(unknown)}")
        return cls(calibration=CalibrationConfig(**cal), **rest)


class Adam:
    """Adam with optional per-tensor row masks (only the listed rows ever change)."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 row_masks: dict[str, np.ndarray] | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.row_masks = row_masks or {}
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad[self.row_masks[k]] if k in self.row_masks else p.grad
            total += float(np.sum(g.astype(np.float64) ** 2))
        return math.sqrt(total)

    def step(self, lr: float | None = None, clip: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        scale = 1.0
        if clip is not None:
            norm = self.grad_norm()
            if norm > clip:
                scale = clip / norm
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            rows = self.row_masks.get(k)
            g = p.grad if rows is None else p.grad[rows]
            g = g * scale
            m = self.m[k] if rows is None else self.m[k][rows]
            v = self.v[k] if rows is None else self.v[k][rows]
            m = self.b1 * m + (1 - self.b1) * g
            v = self.b2 * v + (1 - self.b2) * g * g
            update = (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
            if rows is None:
                self.m[k], self.v[k] = m, v
                p.data = p.data - update
            else:
                self.m[k][rows], self.v[k][rows] = m, v
                data = p.data.copy()
                data[rows] -= update
                p.data = data


# ---------------------------------------------------------------- data


def corpus_batch(rng: np.random.Generator, n: int, cond_dropout: float = 0.1, color_prob: float = 0.3,
                 rare_prob: float = 0.0):
    """Random pretraining scenes: images (n, 32, 32, 3) and captions."""
    images, captions = [], []
    for _ in range(n):
        spec = random_scene(rng, color_prob=color_prob, rare_prob=rare_prob)
        images.append(render_scene(spec, validate=False))
        captions.append("" if rng.random() < cond_dropout else spec.caption)
    return np.stack(images), captions


def build_regularization_set(classes, size: int = 200, seed: int = 0):
    """``size`` generic scenes of the given classes, all captioned ``a c1 and a c2``."""
    classes = list(classes)
    for c in classes:
        if c not in CLASS_NOUNS:
            raise ValueError(f"unknown class noun {c!r}")
    rng = np.random.default_rng(seed)
    caption = template_prompt(classes)
    specs = [random_scene(rng, classes=classes) for _ in range(size)]
    for s in specs:
        s.caption = caption
    images = np.stack([render_scene(s, validate=False) for s in specs]) if specs else np.zeros((0, 32, 32, 3),
                                                                                                np.float32)
    return RegularizationSet(images=images, captions=[caption] * size, specs=specs)


@dataclass
class RegularizationSet:
    images: np.ndarray
    captions: list
    specs: list

    def __len__(self):
        return len(self.captions)


def augment(image: np.ndarray, caption: str, scale: float = 1.0, flip: bool = False):
    """Rescale about the centre on a neutral (0) background, then optionally mirror left-right."""
    image = np.asarray(image, dtype=np.float32)
    size = image.shape[0]
    out = image
    if scale != 1.0:
        new = max(1, int(round(size * scale)))
        zoomed = ndimage.zoom(image, (new / size, new / size, 1), order=1, mode="nearest", grid_mode=True)
        if new <= size:
            out = np.zeros_like(image)
            off = (size - new) // 2
            out[off:off + new, off:off + new] = zoomed
        else:
            off = (new - size) // 2
            out = zoomed[off:off + size, off:off + size]
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out, dtype=np.float32), caption


def random_augment(rng: np.random.Generator, image: np.ndarray, caption: str, scale_range=(0.6, 1.2)):
    scale = float(rng.uniform(*scale_range))
    flip = bool(rng.random() < 0.5)
    out, caption = augment(image, caption, scale, flip)
    return out, caption, scale


# ---------------------------------------------------------------- pretraining


def validation_set(seed: int = 12345, n: int = 64, T: int = 400):
    rng = np.random.default_rng(seed)
    images, captions = corpus_batch(rng, n, cond_dropout=0.0)
    t = rng.integers(0, T, n)
    eps = rng.standard_normal(images.shape).astype(np.float32)
    return images, captions, t, eps


def validation_mse(model: Denoiser, val, batch: int = 32) -> float:
    images, captions, t, eps = val
    sched = NoiseSchedule(model.cfg.num_timesteps)
    total = 0.0
    with ad.no_grad():
        for i in range(0, len(images), batch):
            seqs = [tokenize(c, model.vocab) for c in captions[i:i + batch]]
            z = forward_noise(images[i:i + batch], t[i:i + batch], eps[i:i + batch], sched)
            pred, _ = model(Tensor(z, dtype=np.float32), t[i:i + batch], model.encode(seqs), seqs)
            total += float(np.sum((pred.data - eps[i:i + batch]) ** 2))
    return total / eps.size


@dataclass
class PretrainResult:
    model: Denoiser
    val_mse_init: float
    val_mse_final: float
    zero_baseline: float
    losses: list


def pretrain(model: Denoiser, cfg: TrainConfig, steps: int | None = None, log_every: int = 100,
             checkpoint_path=None, checkpoint_every: int = 0) -> PretrainResult:
    """Train every parameter on random captioned scenes with the epsilon objective."""
    from .checkpoint import save_model

    steps = cfg.pretrain_steps if steps is None else steps
    model.unfreeze_all()
    sched = NoiseSchedule(model.cfg.num_timesteps)
    rng = np.random.default_rng(cfg.seed)
    val = validation_set(T=sched.T)
    zero_baseline = float(np.mean(val[3] ** 2))
    val_init = validation_mse(model, val)
    opt = Adam(model.params, cfg.pretrain_lr)
    losses = []
    t0 = time.time()
    for step in range(1, steps + 1):
        images, captions = corpus_batch(rng, cfg.pretrain_batch_size, cfg.cond_dropout, cfg.corpus_color_prob,
                                         cfg.corpus_rare_prob)
        t = rng.integers(0, sched.T, len(images))
        eps = rng.standard_normal(images.shape).astype(np.float32)
        z = forward_noise(images, t, eps, sched)
        seqs = [tokenize(c, model.vocab) for c in captions]
        opt.zero_grad()
        pred, _ = model(Tensor(z, dtype=np.float32), t, model.encode(seqs), seqs)
        loss = base_loss(Tensor(eps, dtype=np.float32), pred)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingDiverged(step, value)
        loss.backward()
        lr = cfg.pretrain_lr * min(1.0, step / max(1, cfg.pretrain_warmup))
        opt.step(lr=lr, clip=cfg.grad_clip)
        losses.append(value)
        if log_every and step % log_every == 0:
            log.info("pretrain step %d loss %.4f (%.1fs)", step, float(np.mean(losses[-log_every:])),
                     time.time() - t0)
        if checkpoint_path and checkpoint_every and step % checkpoint_every == 0:
            save_model(checkpoint_path, model)
    val_final = validation_mse(model, val) if steps else val_init
    return PretrainResult(model, val_init, val_final, zero_baseline, losses)


# ---------------------------------------------------------------- personalization


@dataclass
class PersonalizationTask:
    target_image: np.ndarray
    classes: list
    modifiers: list = field(default_factory=list)
    scene_truth: SceneSpec | None = None

    def __post_init__(self):
        self.classes = list(self.classes)
        if not 1 <= len(self.classes) <= 3:
            raise ValueError("a task has 1 to 3 concepts")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("task classes must be distinct")
        for c in self.classes:
            if c not in CLASS_NOUNS:
                raise ValueError(f"class noun {c!r} is not in the vocabulary")
        if not self.modifiers:
            self.modifiers = list(MODIFIERS[: len(self.classes)])

    @property
    def prompt(self) -> str:
        return template_prompt(self.classes, self.modifiers)

    @classmethod
    def from_scene(cls, spec: SceneSpec) -> PersonalizationTask:
        return cls(target_image=render_scene(spec), classes=spec.classes, scene_truth=spec)


@dataclass
class PersonalizeResult:
    model: Denoiser
    log_rows: list


def personalize(pretrained: Denoiser, task: PersonalizationTask, cfg: TrainConfig,
                log_path=None, on_step=None) -> PersonalizeResult:
    """Fine-tune W_K/W_V (and W_Q with ``train_wq``) plus modifier rows on one image.

    Each batch holds augmented copies of the target (first half) and
    regularization scenes (second half). The calibration terms see only the
    target items. One timestep is drawn per step and shared by the batch.
    ``on_step(step, record)`` is called after every update with that step's
    attention record.
    """
    model = pretrained.clone()
    rng = np.random.default_rng(cfg.seed)
    table = model.params["text.embedding"].data.copy()
    init_modifier_rows(table, rng, model.vocab)
    model.params["text.embedding"].data = table
    model.freeze_for_personalization(cfg.train_wq)

    sched = NoiseSchedule(model.cfg.num_timesteps)
    reg = build_regularization_set(task.classes, cfg.reg_set_size, seed=cfg.seed + 1)
    n_target = cfg.batch_size if len(reg) == 0 else max(1, cfg.batch_size // 2)
    n_reg = cfg.batch_size - n_target
    target_seq = tokenize(task.prompt, model.vocab)
    reg_seq = tokenize(template_prompt(task.classes), model.vocab)
    cal = cfg.calibration
    opt = Adam(model.trainable(), cfg.lr, row_masks=model.row_masks)
    rows = []
    for step in range(1, cfg.personalize_steps + 1):
        imgs = []
        for _ in range(n_target):
            img, _, scale = random_augment(rng, task.target_image, task.prompt)
            log.debug("step %d augment scale %.3f", step, scale)
            imgs.append(img)
        if n_reg:
            pick = rng.integers(0, len(reg), n_reg)
            for i in pick:
                img = reg.images[i]
                imgs.append(img[:, ::-1] if rng.random() < 0.5 else img)
        images = np.stack(imgs).astype(np.float32)
        seqs = [target_seq] * n_target + [reg_seq] * n_reg
        t = int(rng.integers(0, sched.T))
        eps = rng.standard_normal(images.shape).astype(np.float32)
        z = forward_noise(images, t, eps, sched)

        opt.zero_grad()
        pred, record = model(Tensor(z, dtype=np.float32), t, model.encode(seqs), seqs)
        l_base = base_loss(Tensor(eps, dtype=np.float32), pred)
        if cal.active:
            terms = calibration_terms(record, cal, items=range(n_target))
            total = ad.add(l_base, terms.total)
            l_bind, l_ss, degenerate = terms.bind, terms.ss, terms.degenerate
        else:
            total, l_bind, l_ss, degenerate = l_base, 0.0, 0.0, 0
        value = float(total.data)
        if not np.isfinite(value):
            raise TrainingDiverged(step, value)
        total.backward()
        opt.step()
        rows.append({
            "step": step, "t_drawn": t, "l_base": float(l_base.data), "l_bind": l_bind, "l_ss": l_ss,
            "total": value, "degenerate_map_count": degenerate,
        })
        if degenerate:
            log.info("step %d: %d degenerate class maps skipped", step, degenerate)
        if on_step is not None:
            on_step(step, record)
    if log_path is not None:
        write_log(log_path, rows)
    return PersonalizeResult(model=model, log_rows=rows)


def write_log(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def read_log(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
