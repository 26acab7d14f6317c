"""DSDF checkpoint format.

Layout (all integers little-endian)::

    b"DSDF" | version u32 | tensor count u32
    per tensor: name length u16 | UTF-8 name | rank u8 | dims u64 * rank | float32 data

The model config travels next to the checkpoint as ``<path>.cfg`` in
``key = value`` form.
"""
from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np

from .config import dump_kv, load_kv
from .unet import Denoiser, DenoiserConfig

MAGIC = b"DSDF"
VERSION = 1


def dumps(state: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(state)))
    for name, arr in state.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:4] != MAGIC:
        raise ValueError("not a DSDF checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValueError(f"unsupported DSDF version {version}")
    pos = 12
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}Q", raw, pos)
        pos += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(dims)
        pos += 4 * size
        state[name] = arr.astype(np.float32)
    if pos != len(raw):
        raise ValueError(f"trailing bytes in checkpoint ({len(raw) - pos})")
    return state


def save_state(path, state: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(state))


def load_state(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def save_model(path, model: Denoiser) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_state(path, model.state_dict())
    dump_kv(cfg_path(path), model.cfg.to_dict())


def load_model(path) -> Denoiser:
    path = Path(path)
    cfg = DenoiserConfig(**load_kv(cfg_path(path))) if cfg_path(path).exists() else DenoiserConfig()
    model = Denoiser(cfg=cfg)
    model.load_state_dict(load_state(path))
    return model


def cfg_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".cfg")


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob form: sha1("blob <len>\\0" + data)."""
    return hashlib.sha1(b"blob %d\x00" % len(data) + data).hexdigest()


def file_hash(path) -> str:
    return git_blob_hash(Path(path).read_bytes())
