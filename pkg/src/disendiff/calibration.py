"""Attention calibration losses on cross-attention maps.

Maps are (r, r) or batched (B, r, r) tensors; per-item losses reduce over the
two trailing pixel axes.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import AttentionRecord, select_maps
from .autodiff import Tensor
from .tokens import klass, modifier

log = logging.getLogger(__name__)

PIXEL_AXES = (-2, -1)
DEGENERATE_MASS = 1e-6


@dataclass
class CalibrationConfig:
    lambda_bind: float = 0.01
    lambda_ss: float = 0.01
    gaussian_kernel: int = 3
    gaussian_sigma: float = 1.0
    use_gaussian: bool = True
    suppression_count: int = 1
    use_bind: bool = True
    use_ss: bool = True
    separate_only: bool = False
    iou_kind: str = "minmax"
    resolution: int | str = 16

    def __post_init__(self):
        if self.gaussian_kernel < 1 or self.gaussian_kernel % 2 == 0:
            raise ValueError(f"gaussian_kernel must be odd and >= 1, got {self.gaussian_kernel}")
        if self.gaussian_sigma <= 0:
            raise ValueError("gaussian_sigma must be positive")
        if self.lambda_bind < 0 or self.lambda_ss < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.suppression_count not in (0, 1, 2):
            raise ValueError("suppression_count must be 0, 1 or 2")
        if self.iou_kind not in ("minmax", "product"):
            raise ValueError(f"unknown iou_kind {self.iou_kind!r}")

    @classmethod
    def disabled(cls) -> CalibrationConfig:
        """No calibration at all: plain fine-tuning baseline."""
        return cls(lambda_bind=0.0, lambda_ss=0.0, use_bind=False, use_ss=False,
                   use_gaussian=False, suppression_count=0)

    @property
    def active(self) -> bool:
        return (self.use_bind and self.lambda_bind > 0) or (self.use_ss and self.lambda_ss > 0)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise ValueError(f"Gaussian kernel size must be odd, got {size}")
    half = size // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def gaussian_smooth(a: Tensor, kernel: int = 3, sigma: float = 1.0) -> Tensor:
    """Normalized Gaussian blur over the last two axes.

    Borders use half-sample symmetric reflection (the edge pixel is repeated),
    which keeps total mass unchanged as well as constants constant.
    """
    k = gaussian_kernel(kernel, sigma)
    if kernel == 1:
        return a
    half = kernel // 2
    h, w = a.shape[-2], a.shape[-1]
    padded = ad.pad_symmetric(a, half, axes=PIXEL_AXES)
    out = None
    for i in range(kernel):
        for j in range(kernel):
            term = ad.mul(padded[..., i:i + h, j:j + w], float(k[i, j]))
            out = term if out is None else ad.add(out, term)
    return out


def suppress(a: Tensor, times: int = 1) -> Tensor:
    """Elementwise square, ``times`` times; negatives from float noise clamp to 0."""
    for _ in range(times):
        a = ad.clamp_min(a, 0.0)
        a = ad.mul(a, a)
    return a


def _intersection(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "product":
        return ad.sum_(ad.mul(a, b), axis=PIXEL_AXES)
    return ad.sum_(ad.minimum(a, b), axis=PIXEL_AXES)


def _union(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "product":
        return ad.sum_(ad.sub(ad.add(a, b), ad.mul(a, b)), axis=PIXEL_AXES)
    return ad.sum_(ad.maximum(a, b), axis=PIXEL_AXES)


def soft_iou(a: Tensor, b: Tensor, kind: str = "minmax") -> Tensor:
    """sum(min(a, b)) / sum(max(a, b)) per map; two empty maps count as identical (1)."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"soft_iou: shape mismatch {a.shape} vs {b.shape}")
    inter = _intersection(a, b, kind)
    union = _union(a, b, kind)
    empty = union.data <= 0
    if np.any(empty):
        log.warning("soft_iou: both maps all-zero; treating as identical")
        safe = ad.add(union, Tensor(empty.astype(union.data.dtype)))
        ratio = ad.div(inter, safe)
        return ad.add(ratio, Tensor(empty.astype(union.data.dtype)))
    return ad.div(inter, union)


def l_bind(a_m: Tensor, a_c: Tensor, kind: str = "minmax") -> Tensor:
    """1 - IoU(modifier map, class map); the class map is detached."""
    return ad.sub(1.0, soft_iou(a_m, a_c.detach(), kind))


def l_separate(a_ci: Tensor, a_cj: Tensor) -> Tensor:
    """Intersection mass of two class maps."""
    return _intersection(ad.as_tensor(a_ci), ad.as_tensor(a_cj), "minmax")


def l_ss(a_ci: Tensor, a_cj: Tensor, kind: str = "minmax") -> Tensor:
    """IoU of two class maps; gradient flows into both."""
    return soft_iou(a_ci, a_cj, kind)


@dataclass
class CalibrationTerms:
    total: Tensor
    bind: float = 0.0  # unweighted sum of bind terms
    ss: float = 0.0  # unweighted sum of s&s (or separate) terms
    degenerate: int = 0
    per_term: dict = field(default_factory=dict)


def _prepare(a: Tensor, cfg: CalibrationConfig) -> Tensor:
    if cfg.use_gaussian:
        a = gaussian_smooth(a, cfg.gaussian_kernel, cfg.gaussian_sigma)
    return a


def calibration_terms(record: AttentionRecord, cfg: CalibrationConfig, items=None) -> CalibrationTerms:
    """Weighted bind + pairwise s&s losses over the selected batch items (item mean)."""
    if items is None:
        items = list(range(len(record.seqs)))
    items = list(items)
    seq = record.seqs[items[0]]
    n_concepts = seq.num_concepts
    if not 1 <= n_concepts <= 3:
        raise ValueError(f"calibration needs 1 to 3 concepts, prompt has {n_concepts}")

    class_maps = []
    for i in range(1, n_concepts + 1):
        a_c = select_maps(record, klass(i), cfg.resolution, items)
        class_maps.append(suppress(_prepare(a_c, cfg), cfg.suppression_count))

    zero = Tensor(np.zeros(()))
    total = zero
    bind_sum = ss_sum = 0.0
    per_term = {}
    degenerate = 0

    if cfg.use_bind:
        for i in range(1, n_concepts + 1):
            a_m = _prepare(select_maps(record, modifier(i), cfg.resolution, items), cfg)
            term = ad.mean(l_bind(a_m, class_maps[i - 1], cfg.iou_kind))
            per_term[f"bind{i}"] = float(term.data)
            bind_sum += float(term.data)
            total = ad.add(total, ad.mul(term, cfg.lambda_bind))

    if cfg.use_ss and n_concepts > 1:
        mass = [c.data.sum(axis=PIXEL_AXES) for c in class_maps]
        for i in range(n_concepts):
            for j in range(i + 1, n_concepts):
                ok = (mass[i] >= DEGENERATE_MASS) & (mass[j] >= DEGENERATE_MASS)
                degenerate += int((~ok).sum())
                if not ok.any():
                    continue
                ci, cj = class_maps[i], class_maps[j]
                if not ok.all():
                    keep = np.flatnonzero(ok)
                    ci, cj = ci[keep], cj[keep]
                if cfg.separate_only:
                    term = l_separate(ci, cj)
                else:
                    term = l_ss(ci, cj, cfg.iou_kind)
                term = ad.mean(term)
                per_term[f"ss{i + 1}{j + 1}"] = float(term.data)
                ss_sum += float(term.data)
                total = ad.add(total, ad.mul(term, cfg.lambda_ss))

    return CalibrationTerms(total=total, bind=bind_sum, ss=ss_sum, degenerate=degenerate, per_term=per_term)


def calibration_loss(record: AttentionRecord, cfg: CalibrationConfig, items=None) -> Tensor:
    return calibration_terms(record, cfg, items).total


def gaussian_center_weight(kernel: int, sigma: float) -> float:
    """Weight of the kernel centre, g(0,0) / sum g."""
    half = kernel // 2
    norm = sum(math.exp(-(x * x + y * y) / (2 * sigma ** 2))
               for x in range(-half, half + 1) for y in range(-half, half + 1))
    return 1.0 / norm
