"""Small pixel-space U-Net noise predictor with cross-attention text conditioning.

Layout is channels-last throughout: images are (B, 32, 32, 3).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import AttentionMap, AttentionRecord, cross_attention
from .autodiff import Tensor
from .tokens import PAD, VOCAB, Vocabulary, embed_batch, init_embedding_table

EMBED_NAME = "text.embedding"
CONTEXT_NAME = "text.W_ctx"


@dataclass
class DenoiserConfig:
    image_size: int = 32
    base_channels: int = 32
    resolutions: tuple = (32, 16, 8)
    attention_resolutions: tuple = (16,)
    heads: int = 2
    time_embed_dim: int = 128
    embed_dim: int = 32
    groups: int = 8
    num_timesteps: int = 400
    text_context: bool = True

    def __post_init__(self):
        self.resolutions = tuple(self.resolutions)
        self.attention_resolutions = tuple(self.attention_resolutions)
        if 16 not in self.attention_resolutions:
            raise ValueError("attention_resolutions must include 16 (the calibration level)")
        if self.image_size != 32 or self.resolutions != (32, 16, 8):
            raise ValueError("only the 32/16/8 pyramid is supported")
        if not set(self.attention_resolutions) <= {16, 8}:
            raise ValueError("cross-attention is available at 16 and 8 only")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ParamSpec:
    shape: tuple
    init: str  # "normal", "zeros", "ones"
    fan_in: int = 1


def _resblock_specs(prefix: str, cin: int, cout: int, tdim: int) -> dict:
    specs = {
        f"{prefix}.norm1.gamma": ParamSpec((cin,), "ones"),
        f"{prefix}.norm1.beta": ParamSpec((cin,), "zeros"),
        f"{prefix}.conv1.w": ParamSpec((3, 3, cin, cout), "normal", 9 * cin),
        f"{prefix}.conv1.b": ParamSpec((cout,), "zeros"),
        f"{prefix}.temb.w": ParamSpec((tdim, cout), "normal", tdim),
        f"{prefix}.temb.b": ParamSpec((cout,), "zeros"),
        f"{prefix}.norm2.gamma": ParamSpec((cout,), "ones"),
        f"{prefix}.norm2.beta": ParamSpec((cout,), "zeros"),
        f"{prefix}.conv2.w": ParamSpec((3, 3, cout, cout), "zeros"),
        f"{prefix}.conv2.b": ParamSpec((cout,), "zeros"),
    }
    if cin != cout:
        specs[f"{prefix}.skip.w"] = ParamSpec((1, 1, cin, cout), "normal", cin)
        specs[f"{prefix}.skip.b"] = ParamSpec((cout,), "zeros")
    return specs


def _attn_specs(prefix: str, ch: int, edim: int) -> dict:
    return {
        f"{prefix}.norm.gamma": ParamSpec((ch,), "ones"),
        f"{prefix}.norm.beta": ParamSpec((ch,), "zeros"),
        f"{prefix}.W_Q": ParamSpec((ch, ch), "normal", ch),
        f"{prefix}.W_K": ParamSpec((edim, ch), "normal", edim),
        f"{prefix}.W_V": ParamSpec((edim, ch), "normal", edim),
        f"{prefix}.W_O": ParamSpec((ch, ch), "zeros"),
        f"{prefix}.b_O": ParamSpec((ch,), "zeros"),
    }


def _layout(cfg: DenoiserConfig) -> list[tuple[str, str, int, int, int]]:
    """(block name, kind, in channels, out channels, resolution) in forward order."""
    c = cfg.base_channels
    blocks = [
        ("down32", "res", c, c, 32),
        ("down16", "res", c, 2 * c, 16),
        ("down8", "res", 2 * c, 2 * c, 8),
        ("mid8", "res", 2 * c, 2 * c, 8),
        ("up16", "res", 4 * c, 2 * c, 16),
        ("up32", "res", 3 * c, c, 32),
    ]
    return blocks


def param_specs(cfg: DenoiserConfig, vocab: Vocabulary = VOCAB) -> dict[str, ParamSpec]:
    c, tdim = cfg.base_channels, cfg.time_embed_dim
    specs: dict[str, ParamSpec] = {
        EMBED_NAME: ParamSpec((len(vocab), cfg.embed_dim), "embedding"),
        **({CONTEXT_NAME: ParamSpec((cfg.embed_dim, cfg.embed_dim), "normal", cfg.embed_dim)}
           if cfg.text_context else {}),
        "time.fc1.w": ParamSpec((c, tdim), "normal", c),
        "time.fc1.b": ParamSpec((tdim,), "zeros"),
        "time.fc2.w": ParamSpec((tdim, tdim), "normal", tdim),
        "time.fc2.b": ParamSpec((tdim,), "zeros"),
        "conv_in.w": ParamSpec((3, 3, 3, c), "normal", 27),
        "conv_in.b": ParamSpec((c,), "zeros"),
    }
    for name, _, cin, cout, res in _layout(cfg):
        specs.update(_resblock_specs(f"{name}.res", cin, cout, tdim))
        if res in cfg.attention_resolutions and not name.startswith("up"):
            specs.update(_attn_specs(f"{name}.attn", cout, cfg.embed_dim))
    specs.update({
        "out.norm.gamma": ParamSpec((c,), "ones"),
        "out.norm.beta": ParamSpec((c,), "zeros"),
        "out.conv.w": ParamSpec((3, 3, c, 3), "zeros"),
        "out.conv.b": ParamSpec((3,), "zeros"),
    })
    return specs


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def is_personalization_param(name: str, train_wq: bool = False) -> bool:
    if name == EMBED_NAME:
        return True
    if ".attn." not in name:
        return False
    leaf = name.rsplit(".", 1)[1]
    return leaf in ("W_K", "W_V") or (train_wq and leaf == "W_Q")


@dataclass
class Denoiser:
    cfg: DenoiserConfig
    params: dict[str, Tensor] = field(default_factory=dict)
    vocab: Vocabulary = field(default_factory=lambda: VOCAB)
    # parameter name -> row ids the optimizer may touch (absent = whole tensor)
    row_masks: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: DenoiserConfig | None = None, seed: int = 0, vocab: Vocabulary = VOCAB) -> Denoiser:
        cfg = cfg or DenoiserConfig()
        rng = np.random.default_rng(seed)
        params = {}
        for name, spec in param_specs(cfg, vocab).items():
            if spec.init == "embedding":
                data = init_embedding_table(rng, vocab, cfg.embed_dim)
            elif spec.init == "normal":
                data = rng.standard_normal(spec.shape) / math.sqrt(spec.fan_in)
            elif spec.init == "ones":
                data = np.ones(spec.shape)
            else:
                data = np.zeros(spec.shape)
            params[name] = Tensor(data.astype(np.float32), requires_grad=True, name=name, dtype=np.float32)
        return cls(cfg=cfg, params=params, vocab=vocab)

    # ------------------------------------------------------------ parameters

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = param_specs(self.cfg, self.vocab)
        missing = set(expected) - set(state)
        extra = set(state) - set(expected)
        if missing or extra:
            raise KeyError(f"state mismatch; missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, spec in expected.items():
            arr = np.asarray(state[k], dtype=np.float32)
            if arr.shape != tuple(spec.shape):
                raise ValueError(f"{k}: shape {arr.shape} does not match {spec.shape}")
            self.params[k] = Tensor(arr.copy(), requires_grad=True, name=k, dtype=np.float32)

    def clone(self) -> Denoiser:
        other = Denoiser(cfg=self.cfg, vocab=self.vocab)
        other.params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k, dtype=v.data.dtype)
                        for k, v in self.params.items()}
        other.row_masks = {k: v.copy() for k, v in self.row_masks.items()}
        return other

    def astype(self, dtype) -> Denoiser:
        other = self.clone()
        for p in other.params.values():
            p.data = p.data.astype(dtype)
        return other

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def num_parameters(self) -> int:
        return sum(v.data.size for v in self.params.values())

    def freeze_for_personalization(self, train_wq: bool = False) -> None:
        """Only cross-attention W_K/W_V (optionally W_Q) and modifier rows stay trainable."""
        for name, p in self.params.items():
            p.requires_grad = is_personalization_param(name, train_wq)
            p.grad = None
        self.row_masks = {EMBED_NAME: np.array(self.vocab.modifier_ids)}

    def unfreeze_all(self) -> None:
        for p in self.params.values():
            p.requires_grad = True
        self.row_masks = {}

    # ------------------------------------------------------------ forward

    def encode(self, seqs) -> Tensor:
        """Token states (B, N, E): the embedding row, plus W_ctx times the previous word's row."""
        table = self.params[EMBED_NAME]
        tau = embed_batch(seqs, table)
        if not self.cfg.text_context:
            return tau
        ids = np.array([s.ids for s in seqs])
        prev = np.roll(ids, 1, axis=1)
        pad = self.vocab.id(PAD)
        keep = (np.arange(ids.shape[1]) > 0) & (ids != pad) & (prev != pad)
        prev[~keep] = pad
        ctx = ad.linear(ad.take_rows(table, prev), self.params[CONTEXT_NAME])
        return ad.add(tau, ad.mul(ctx, Tensor(keep[..., None].astype(tau.data.dtype))))

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        p = self.params
        x = ad.group_norm(x, self.cfg.groups)
        return ad.add(ad.mul(x, p[f"{prefix}.gamma"]), p[f"{prefix}.beta"])

    def _resblock(self, x: Tensor, temb: Tensor, prefix: str) -> Tensor:
        p = self.params
        h = ad.conv2d(ad.silu(self._norm(x, f"{prefix}.norm1")), p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"], 1)
        tproj = ad.linear(ad.silu(temb), p[f"{prefix}.temb.w"], p[f"{prefix}.temb.b"])
        h = ad.add(h, ad.reshape(tproj, (tproj.shape[0], 1, 1, tproj.shape[1])))
        h = ad.conv2d(ad.silu(self._norm(h, f"{prefix}.norm2")), p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"], 1)
        if f"{prefix}.skip.w" in p:
            x = ad.conv2d(x, p[f"{prefix}.skip.w"], p[f"{prefix}.skip.b"])
        return ad.add(x, h)

    def _attn(self, x: Tensor, tau: Tensor, prefix: str, record: AttentionRecord, res: int) -> Tensor:
        p = self.params
        h = self._norm(x, f"{prefix}.norm")
        out, maps = cross_attention(h, tau, p[f"{prefix}.W_Q"], p[f"{prefix}.W_K"], p[f"{prefix}.W_V"],
                                    heads=self.cfg.heads)
        record.maps.append(AttentionMap(values=maps, resolution=res, layer=prefix))
        return ad.add(x, ad.linear(out, p[f"{prefix}.W_O"], p[f"{prefix}.b_O"]))

    def forward(self, z: Tensor, t, tau: Tensor, seqs=None):
        """Predict the added noise. z: (B, 32, 32, 3); t: int or (B,) ints; tau: (B, N, E).

        Returns (eps_hat, AttentionRecord).
        """
        z = ad.as_tensor(z)
        unbatched = z.ndim == 3
        if unbatched:
            z = ad.reshape(z, (1,) + z.shape)
            if tau.ndim == 2:
                tau = ad.reshape(tau, (1,) + tau.shape)
        bsz = z.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (bsz,))
        if np.any(t < 0) or np.any(t >= self.cfg.num_timesteps):
            raise ValueError(f"timestep out of range [0, {self.cfg.num_timesteps}): {t}")
        if z.shape[1:] != (32, 32, 3):
            raise ValueError(f"expected (B, 32, 32, 3) input, got {z.shape}")
        p = self.params
        record = AttentionRecord(seqs=list(seqs) if seqs is not None else [])
        c = self.cfg.base_channels
        temb = Tensor(timestep_embedding(t, c), dtype=z.data.dtype)
        temb = ad.linear(temb, p["time.fc1.w"], p["time.fc1.b"])
        temb = ad.linear(ad.silu(temb), p["time.fc2.w"], p["time.fc2.b"])

        attn_res = self.cfg.attention_resolutions
        h = ad.conv2d(z, p["conv_in.w"], p["conv_in.b"], 1)
        h32 = self._resblock(h, temb, "down32.res")
        h = self._resblock(ad.avg_pool2(h32), temb, "down16.res")
        if 16 in attn_res:
            h = self._attn(h, tau, "down16.attn", record, 16)
        h16 = h
        h = self._resblock(ad.avg_pool2(h16), temb, "down8.res")
        if 8 in attn_res:
            h = self._attn(h, tau, "down8.attn", record, 8)
        h = self._resblock(h, temb, "mid8.res")
        if 8 in attn_res:
            h = self._attn(h, tau, "mid8.attn", record, 8)
        h = ad.concat([ad.upsample2(h), h16], axis=-1)
        h = self._resblock(h, temb, "up16.res")
        h = ad.concat([ad.upsample2(h), h32], axis=-1)
        h = self._resblock(h, temb, "up32.res")
        h = ad.silu(self._norm(h, "out.norm"))
        eps = ad.conv2d(h, p["out.conv.w"], p["out.conv.b"], 1)
        if unbatched:
            eps = ad.reshape(eps, eps.shape[1:])
        for m in record.maps:
            m.timestep = int(t[0]) if np.all(t == t[0]) else None
        return eps, record

    __call__ = forward
