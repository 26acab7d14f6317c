"""Procedural multi-object scenes with exact ground-truth masks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tokens import CLASS_NOUNS, COLOR_WORDS, RARE_WORD

IMAGE_SIZE = 32
SUPERSAMPLE = 4
MARGIN = 1.0
MAX_OVERLAP = 0.10

PALETTE = {
    "red": (0.95, 0.15, 0.15),
    "green": (0.10, 0.80, 0.20),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.90, 0.10),
    "cyan": (0.10, 0.90, 0.90),
    "magenta": (0.90, 0.15, 0.85),
    "orange": (1.00, 0.55, 0.05),
    "white": (0.97, 0.97, 0.97),
}
assert tuple(PALETTE) == COLOR_WORDS

STRIPE_DARKEN = 0.6
RING_INNER = 0.5


@dataclass
class ConceptInstance:
    shape: str
    color: tuple
    center: tuple  # (x, y) in pixels, x to the right, y downward
    radius: float  # disc/ring radius, square half-extent, triangle circumradius
    stripes: bool = False

    def __post_init__(self):
        if self.shape not in CLASS_NOUNS:
            raise ValueError(f"unknown shape {self.shape!r}")
        self.color = tuple(float(c) for c in self.color)
        self.center = (float(self.center[0]), float(self.center[1]))

    @property
    def reach(self) -> float:
        """Radius of the bounding circle around the centre."""
        return self.radius * np.sqrt(2.0) if self.shape == "square" else self.radius

    def bounds(self) -> tuple[float, float, float, float]:
        x, y = self.center
        r = self.radius
        if self.shape == "triangle":
            return x - r * np.sqrt(3) / 2, y - r, x + r * np.sqrt(3) / 2, y + r / 2
        return x - r, y - r, x + r, y + r

    def inside(self, px: np.ndarray, py: np.ndarray) -> np.ndarray:
        x, y = self.center
        dx, dy = px - x, py - y
        r = self.radius
        if self.shape == "disc":
            return dx * dx + dy * dy <= r * r
        if self.shape == "ring":
            d2 = dx * dx + dy * dy
            return (d2 <= r * r) & (d2 >= (RING_INNER * r) ** 2)
        if self.shape == "square":
            return (np.abs(dx) <= r) & (np.abs(dy) <= r)
        # upward equilateral triangle: apex at (x, y - r), base at y + r/2
        s3 = np.sqrt(3.0)
        return (dy <= r / 2) & (s3 * dx - dy <= r) & (-s3 * dx - dy <= r)


@dataclass
class SceneSpec:
    instances: list[ConceptInstance] = field(default_factory=list)
    background: float = 0.5
    caption: str = ""

    def validate(self) -> None:
        if len(self.instances) > 3:
            raise ValueError("at most 3 instances per scene")
        for inst in self.instances:
            x0, y0, x1, y1 = inst.bounds()
            if x0 < MARGIN or y0 < MARGIN or x1 > IMAGE_SIZE - MARGIN or y1 > IMAGE_SIZE - MARGIN:
                raise ValueError(f"{inst.shape} at {inst.center} leaves the frame margin")
        masks = self.masks()
        for i in range(len(masks)):
            for j in range(i + 1, len(masks)):
                small = min(masks[i].sum(), masks[j].sum())
                if small and (masks[i] & masks[j]).sum() >= MAX_OVERLAP * small:
                    raise ValueError(f"instances {i} and {j} overlap by 10% or more")

    def coverage(self) -> list[np.ndarray]:
        """Per-instance fractional pixel coverage from 4x4 supersampling."""
        n = IMAGE_SIZE * SUPERSAMPLE
        sub = (np.arange(n) + 0.5) / SUPERSAMPLE
        px, py = np.meshgrid(sub, sub)
        out = []
        for inst in self.instances:
            hit = inst.inside(px, py).astype(np.float64)
            out.append(hit.reshape(IMAGE_SIZE, SUPERSAMPLE, IMAGE_SIZE, SUPERSAMPLE).mean(axis=(1, 3)))
        return out

    def masks(self) -> list[np.ndarray]:
        return [c > 0.5 for c in self.coverage()]

    @property
    def classes(self) -> list[str]:
        return [inst.shape for inst in self.instances]


def render_scene(spec: SceneSpec, validate: bool = True) -> np.ndarray:
    """Anti-aliased (32, 32, 3) image in [-1, 1]."""
    if validate:
        spec.validate()
    img = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), spec.background, dtype=np.float64)
    if spec.instances:
        ys = np.arange(IMAGE_SIZE)[:, None] + 0.5
        xs = np.arange(IMAGE_SIZE)[None, :] + 0.5
    for inst, cov in zip(spec.instances, spec.coverage()):
        color = np.broadcast_to(np.array(inst.color), img.shape).copy()
        if inst.stripes:
            band = ((xs + ys) // 3).astype(int) % 2 == 1
            band = np.broadcast_to(band, (IMAGE_SIZE, IMAGE_SIZE))
            color[band] = stripe_color(inst.color, spec.background)
        img = img * (1.0 - cov[..., None]) + color * cov[..., None]
    return (img * 2.0 - 1.0).astype(np.float32)


def stripe_color(color, background: float = 0.5) -> np.ndarray:
    dark = np.array(color) * STRIPE_DARKEN
    if np.abs(dark - background).max() < 0.3:
        dark = np.array(color) * 0.15
    return dark


def caption_for(instances, rng: np.random.Generator | None = None, color_prob: float = 0.0,
                rare_prob: float = 0.0) -> str:
    """``a [colour] shape and ...``; with ``rare_prob`` a mention becomes ``<rare word> shape``.

    The rare word sits right before the noun, the slot a modifier token takes in
    ``V1* disc``, so modifiers initialised from it start in a familiar context.
    """
    parts = []
    for inst in instances:
        name = color_name(inst.color)
        if rng is not None and rare_prob > 0 and rng.random() < rare_prob:
            parts.append(f"{RARE_WORD} {inst.shape}")
        elif rng is not None and name is not None and len(instances) <= 2 and rng.random() < color_prob:
            parts.append(f"a {name} {inst.shape}")
        else:
            parts.append(f"a {inst.shape}")
    return " and ".join(parts)


def color_name(color) -> str | None:
    for name, rgb in PALETTE.items():
        if np.allclose(rgb, color, atol=1e-6):
            return name
    return None


def random_instance(rng: np.random.Generator, shape: str, color=None, radius_range=(5.0, 7.5),
                    stripes: bool = False) -> ConceptInstance:
    r = float(rng.uniform(*radius_range))
    if shape == "square":
        r *= 0.85
    if color is None:
        color = PALETTE[COLOR_WORDS[rng.integers(len(COLOR_WORDS))]]
    lo = MARGIN + r + 0.5
    hi = IMAGE_SIZE - MARGIN - r - 0.5
    if shape == "triangle":
        # apex reaches r above the centre, base only r/2 below
        lo_y, hi_y = MARGIN + r + 0.5, IMAGE_SIZE - MARGIN - r / 2 - 0.5
        return ConceptInstance(shape, color, (rng.uniform(lo, hi), rng.uniform(lo_y, hi_y)), r, stripes)
    return ConceptInstance(shape, color, (rng.uniform(lo, hi), rng.uniform(lo, hi)), r, stripes)


def random_scene(rng: np.random.Generator, classes=None, n_range=(1, 3), color_prob: float = 0.3,
                 gap: float = 2.0, max_tries: int = 200, rare_prob: float = 0.0) -> SceneSpec:
    """Scene with distinct classes, well separated so components never touch."""
    if classes is None:
        n = int(rng.integers(n_range[0], n_range[1] + 1))
        classes = list(rng.choice(CLASS_NOUNS, size=n, replace=False))
    classes = list(classes)
    radius_range = (5.0, 7.5) if len(classes) <= 2 else (4.5, 6.0)
    for _ in range(max_tries):
        insts: list[ConceptInstance] = []
        for shape in classes:
            for _ in range(max_tries):
                cand = random_instance(rng, shape, radius_range=radius_range)
                if all(np.hypot(cand.center[0] - o.center[0], cand.center[1] - o.center[1])
                       > cand.reach + o.reach + gap for o in insts):
                    insts.append(cand)
                    break
            else:
                break
        if len(insts) == len(classes):
            spec = SceneSpec(insts, caption=caption_for(insts, rng, color_prob, rare_prob))
            spec.validate()
            return spec
    raise RuntimeError(f"could not place {classes} without overlap")


def downsample_mask(mask: np.ndarray, factor: int = 2) -> np.ndarray:
    """Area-average pooling, then keep cells more than half covered."""
    h, w = mask.shape
    pooled = mask.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return pooled > 0.5
