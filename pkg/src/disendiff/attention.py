"""Cross-attention between spatial features and token embeddings, plus map records."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokens import Role, TokenSeq


@dataclass
class AttentionMap:
    """Softmax maps of one layer: values (B, heads, r, r, N)."""

    values: Tensor
    resolution: int
    layer: str = ""
    timestep: int | None = None

    @property
    def heads(self) -> int:
        return self.values.shape[1]


@dataclass
class AttentionRecord:
    maps: list[AttentionMap] = field(default_factory=list)
    seqs: list[TokenSeq] = field(default_factory=list)  # one per batch item

    @property
    def resolutions(self) -> list[int]:
        return sorted({m.resolution for m in self.maps})

    def at(self, resolution: int) -> list[AttentionMap]:
        return [m for m in self.maps if m.resolution == resolution]


def cross_attention(phi: Tensor, tau: Tensor, w_q: Tensor, w_k: Tensor, w_v: Tensor, heads: int = 1):
    """Attention of every spatial position over the N text tokens.

    phi: (B, r, r, C) or (r, r, C); tau: (B, N, E) or (N, E).
    w_q: (C, heads*d), w_k and w_v: (E, heads*dv).
    Returns out (…, r, r, heads*dv) and maps (…, heads, r, r, N).
    """
    unbatched = phi.ndim == 3
    if unbatched:
        phi = ad.reshape(phi, (1,) + phi.shape)
    if tau.ndim == 2:
        tau = ad.reshape(tau, (1,) + tau.shape)
    bsz, r, r2, c = phi.shape
    n, e = tau.shape[1], tau.shape[2]
    if w_q.shape[0] != c or w_k.shape[0] != e or w_v.shape[0] != e:
        raise ValueError(
            f"cross_attention: dimension mismatch phi {phi.shape}, tau {tau.shape}, "
            f"W_Q {w_q.shape}, W_K {w_k.shape}, W_V {w_v.shape}"
        )
    if w_q.shape[1] != w_k.shape[1] or w_q.shape[1] % heads or w_v.shape[1] % heads:
        raise ValueError(f"cross_attention: projection widths {w_q.shape[1]}/{w_k.shape[1]}/{w_v.shape[1]} "
                         f"incompatible with {heads} heads")
    if tau.shape[0] not in (1, bsz):
        raise ValueError(f"cross_attention: batch mismatch {phi.shape} vs {tau.shape}")
    d = w_q.shape[1] // heads
    dv = w_v.shape[1] // heads
    q = ad.linear(ad.reshape(phi, (bsz, r * r2, c)), w_q)  # B, P, h*d
    k = ad.linear(tau, w_k)
    v = ad.linear(tau, w_v)
    q = ad.transpose(ad.reshape(q, (bsz, r * r2, heads, d)), (0, 2, 1, 3))  # B, h, P, d
    k = ad.transpose(ad.reshape(k, (k.shape[0], n, heads, d)), (0, 2, 3, 1))  # B, h, d, N
    v = ad.transpose(ad.reshape(v, (v.shape[0], n, heads, dv)), (0, 2, 1, 3))  # B, h, N, dv
    logits = ad.mul(ad.matmul(q, k), 1.0 / np.sqrt(d))
    attn = ad.softmax(logits, axis=-1)  # B, h, P, N
    out = ad.matmul(attn, v)  # B, h, P, dv
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (bsz, r, r2, heads * dv))
    maps = ad.reshape(attn, (bsz, heads, r, r2, n))
    if unbatched:
        out = ad.reshape(out, out.shape[1:])
        maps = ad.reshape(maps, maps.shape[1:])
    return out, maps


def select_maps(record: AttentionRecord, role: Role, resolution: int | str, items=None) -> Tensor:
    """Head- and layer-averaged map of one token role: (B_sel, r, r).

    ``resolution="all"`` averages every recorded resolution after upsampling
    coarser maps by pixel repetition to the finest calibration level of 16.
    """
    if items is None:
        items = list(range(len(record.seqs)))
    items = list(items)
    if not items:
        raise ValueError("no batch items selected")
    positions = {record.seqs[i].position(role) for i in items}
    if len(positions) != 1:
        raise ValueError(f"role {role} sits at different token positions across the selected items")
    pos = positions.pop()
    if resolution == "all":
        levels = record.resolutions
        target = 16 if 16 in levels else max(levels)
    else:
        if resolution not in record.resolutions:
            raise KeyError(f"no attention maps recorded at resolution {resolution}")
        levels, target = [resolution], resolution
    picked = []
    sel = np.array(items)
    full_batch = len(items) == record.maps[0].values.shape[0] and items == sorted(items) and items[0] == 0
    for level in levels:
        for m in record.at(level):
            v = m.values[:, :, :, :, pos] if full_batch else m.values[sel, :, :, :, pos]
            v = ad.mean(v, axis=1)  # over heads
            while v.shape[-1] < target:
                v = _upsample_map(v)
            while v.shape[-1] > target:
                v = _downsample_map(v)
            picked.append(v)
    total = picked[0]
    for v in picked[1:]:
        total = ad.add(total, v)
    return ad.mul(total, 1.0 / len(picked)) if len(picked) > 1 else total


def _upsample_map(v: Tensor) -> Tensor:
    b, r, _ = v.shape
    x = ad.upsample2(ad.reshape(v, (b, r, r, 1)))
    return ad.reshape(x, (b, 2 * r, 2 * r))


def _downsample_map(v: Tensor) -> Tensor:
    b, r, _ = v.shape
    x = ad.avg_pool2(ad.reshape(v, (b, r, r, 1)))
    return ad.reshape(x, (b, r // 2, r // 2))


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary PGM (P5), linearly scaled so the map maximum maps to 255."""
    values = np.asarray(values, dtype=np.float64)
    peak = values.max()
    scaled = np.zeros_like(values) if peak <= 0 else values / peak * 255.0
    pix = np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw[pos + 1: pos + 1 + w * h], dtype=np.uint8).reshape(h, w)
