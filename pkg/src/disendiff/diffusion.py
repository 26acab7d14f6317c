"""Noise schedule, forward noising, the epsilon-prediction objective and DDIM sampling."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokens import TokenSeq, tokenize


@dataclass
class NoiseSchedule:
    T: int = 400
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        self.betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def ddim_timesteps(self, steps: int) -> np.ndarray:
        """Descending, uniformly strided timesteps ending exactly at 0."""
        if steps > self.T:
            raise ValueError(f"steps={steps} exceeds T={self.T}")
        if steps < 1:
            raise ValueError("need at least one step")
        if steps == 1:
            return np.array([self.T - 1])
        return np.round(np.linspace(self.T - 1, 0, steps)).astype(np.int64)


def forward_noise(x0, t, eps, schedule: NoiseSchedule):
    """sqrt(abar_t) x0 + sqrt(1 - abar_t) eps; works on arrays or Tensors, scalar or per-item t."""
    t_arr = np.asarray(t)
    if np.any(t_arr >= schedule.T) or np.any(t_arr < 0):
        raise ValueError(f"timestep {t} outside [0, {schedule.T})")
    abar = schedule.alpha_bars[t_arr]
    x0_data = x0.data if isinstance(x0, Tensor) else np.asarray(x0)
    if abar.ndim:
        abar = abar.reshape((-1,) + (1,) * (x0_data.ndim - 1))
    a = np.sqrt(abar).astype(x0_data.dtype)
    b = np.sqrt(1.0 - abar).astype(x0_data.dtype)
    if isinstance(x0, Tensor) or isinstance(eps, Tensor):
        return ad.add(ad.mul(x0, Tensor(a)), ad.mul(eps, Tensor(b)))
    return a * x0_data + b * np.asarray(eps)


def base_loss(eps, eps_hat) -> Tensor:
    """Mean squared error over every element."""
    eps, eps_hat = ad.as_tensor(eps), ad.as_tensor(eps_hat)
    if eps.shape != eps_hat.shape:
        raise ValueError(f"base_loss: shape mismatch {eps.shape} vs {eps_hat.shape}")
    diff = ad.sub(eps_hat, eps)
    return ad.mean(ad.mul(diff, diff))


def ddim_loop(eps_fn: Callable[[np.ndarray, int], np.ndarray], z: np.ndarray, schedule: NoiseSchedule,
              steps: int, clip: float | None = 1.0) -> np.ndarray:
    """Deterministic (eta = 0) DDIM trajectory from ``z`` at t = T-1 down to t = 0.

    ``eps_fn(z_t, t)`` returns predicted noise. With ``clip`` set, the implied
    clean image is clamped to [-clip, clip] at every step.
    """
    ts = schedule.ddim_timesteps(steps)
    abar = schedule.alpha_bars
    dtype = z.dtype
    x0 = z
    for k, t in enumerate(ts):
        eps = eps_fn(z, int(t))
        a_t = abar[t]
        x0 = (z - np.sqrt(1.0 - a_t) * eps) / np.sqrt(a_t)
        if clip is not None:
            x0 = np.clip(x0, -clip, clip)
            eps = (z - np.sqrt(a_t) * x0) / np.sqrt(1.0 - a_t)
        if k + 1 < len(ts):
            a_prev = abar[ts[k + 1]]
            z = np.sqrt(a_prev) * x0 + np.sqrt(1.0 - a_prev) * eps
            z = z.astype(dtype, copy=False)
    return x0.astype(dtype, copy=False)


def guided_eps(eps_cond: np.ndarray, eps_uncond: np.ndarray, guidance: float) -> np.ndarray:
    if guidance == 1.0:
        return eps_cond
    return eps_uncond + guidance * (eps_cond - eps_uncond)


def ddim_sample(model, prompt, steps: int = 50, guidance: float = 6.0, seed: int = 0, n: int = 1,
                schedule: NoiseSchedule | None = None, return_all: bool = False) -> np.ndarray:
    """Classifier-free guided DDIM samples in [-1, 1]; (32, 32, 3), or (n, 32, 32, 3) if n > 1.

    The starting noise comes from ``np.random.default_rng(seed)``, so the same
    seed and prompt reproduce the same image bit for bit.
    """
    schedule = schedule or NoiseSchedule(model.cfg.num_timesteps)
    if steps > schedule.T:
        raise ValueError(f"steps={steps} exceeds T={schedule.T}")
    seq = prompt if isinstance(prompt, TokenSeq) else tokenize(prompt, model.vocab)
    null = tokenize("", model.vocab)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, 32, 32, 3)).astype(np.float32)
    use_cfg = guidance != 1.0
    seqs = [seq] * n + ([null] * n if use_cfg else [])
    with ad.no_grad():
        tau = model.encode(seqs)

        def eps_fn(zt, t):
            batch = np.concatenate([zt, zt]) if use_cfg else zt
            eps, _ = model(Tensor(batch, dtype=np.float32), t, tau, seqs)
            if not use_cfg:
                return eps.data
            return guided_eps(eps.data[:n], eps.data[n:], guidance)

        out = ddim_loop(eps_fn, z, schedule, steps)
    out = np.clip(out, -1.0, 1.0).astype(np.float32)
    return out if (n > 1 or return_all) else out[0]


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 255] with round-half-up."""
    scaled = (np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0) + 1.0) * 127.5
    return np.floor(scaled + 0.5).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    pix = to_uint8(image)
    h, w, _ = pix.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_ppm(path) -> np.ndarray:
    """Returns uint8 (H, W, 3)."""
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw[pos + 1: pos + 1 + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
