"""Dense numpy tensors with tape-based reverse-mode differentiation.

Every op returns a new :class:`Tensor`. When any input requires grad, the
output keeps a reference to its parents plus a closure mapping the output
gradient to input gradients. :func:`backward` walks that graph in reverse
topological order.
"""
from __future__ import annotations

import contextlib
import os
from typing import Callable, Sequence

import numpy as np

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype = _PRECISIONS.get(os.environ.get("DISENDIFF_PRECISION", "f32"), np.float32)
_grad_enabled = True


def set_precision(name: str) -> None:
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}, expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def get_dtype():
    return _dtype


@contextlib.contextmanager
def precision(name: str):
    old = _dtype
    set_precision(name)
    try:
        yield
    finally:
        globals()["_dtype"] = old


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    old = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "detached", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self.detached = False
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        out = Tensor(self.data, dtype=self.data.dtype)
        out.detached = True
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _make(out, (a, b), bw)


def pow_(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * pos,))


def clamp_min(a: Tensor, lo: float = 0.0) -> Tensor:
    keep = a.data >= lo
    out = np.where(keep, a.data, lo).astype(a.data.dtype)
    return _make(out, (a,), lambda g: (g * keep,))


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig
    return _make(out, (a,), lambda g: (g * sig * (1.0 + a.data * (1.0 - sig)),))


def minimum(a, b) -> Tensor:
    """Elementwise min. Ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("minimum", a.data, b.data)
    pick_a = a.data <= b.data

    def bw(g):
        return (_unbroadcast(g * pick_a, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ~pick_a, b.shape) if b.requires_grad else None)

    return _make(np.minimum(a.data, b.data), (a, b), bw)


def maximum(a, b) -> Tensor:
    """Elementwise max. Ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("maximum", a.data, b.data)
    pick_a = a.data >= b.data

    def bw(g):
        return (_unbroadcast(g * pick_a, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ~pick_a, b.shape) if b.requires_grad else None)

    return _make(np.maximum(a.data, b.data), (a, b), bw)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return _make(np.asarray(out), (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a: Tensor, key) -> Tensor:
    out = a.data[key]

    keys = key if isinstance(key, tuple) else (key,)
    basic = not any(isinstance(k, (np.ndarray, list)) for k in keys)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out), (a,), bw)


def take_rows(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"row id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(out, (table,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def pad_symmetric(a: Tensor, pad: int, axes=(-2, -1)) -> Tensor:
    """Half-sample symmetric padding (edge pixel repeated) on the given axes."""
    if pad == 0:
        return a
    axes = _norm_axis(axes, a.ndim)
    widths = [(pad, pad) if ax in axes else (0, 0) for ax in range(a.ndim)]
    for ax in axes:
        if a.shape[ax] < pad:
            raise ValueError(f"pad {pad} exceeds axis length {a.shape[ax]}")
    out = np.pad(a.data, widths, mode="symmetric")

    def bw(g):
        for ax in axes:
            n = a.shape[ax]
            g = np.moveaxis(g, ax, 0)
            core = g[pad:pad + n].copy()
            core[:pad] += g[:pad][::-1]
            core[n - pad:] += g[pad + n:][::-1]
            g = np.moveaxis(core, 0, ax)
        return (g,)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}") from None

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w (+ b)`` over the last axis, flattening leading dims for one GEMM."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear: shape mismatch {x.shape} vs {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (w.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 2-D convolution in channels-last layout.

    x: (B, H, W, Cin); w: (kh, kw, Cin, Cout). Zero padding.
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[-1] != w.shape[2]:
        raise ValueError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    kh, kw, cin, cout = w.shape
    bsz, h, wd, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    ho, wo = xp.shape[1] - kh + 1, xp.shape[2] - kw + 1
    if kh == kw == 1:
        cols = xp.reshape(-1, cin)
    else:
        cols = np.concatenate(
            [xp[:, i:i + ho, j:j + wo, :] for i in range(kh) for j in range(kw)], axis=-1
        ).reshape(-1, kh * kw * cin)
    wmat = w.data.reshape(-1, cout)
    out = cols @ wmat
    if b is not None:
        out += b.data
    out = out.reshape(bsz, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = gw = gb = None
        if x.requires_grad:
            if kh == kw == 1:
                gx = (g2 @ wmat.T).reshape(xp.shape)
                if padding:
                    gx = gx[:, padding:padding + h, padding:padding + wd, :]
            else:
                # input gradient = full correlation of g with the flipped, transposed kernel
                gp = np.pad(g, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
                pr = padding
                gcols = np.concatenate(
                    [gp[:, pr + i:pr + i + h, pr + j:pr + j + wd, :] for i in range(kh) for j in range(kw)],
                    axis=-1,
                ).reshape(-1, kh * kw * cout)
                wflip = w.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, cin)
                gx = (gcols @ wflip).reshape(x.shape)
        if w.requires_grad:
            gw = (cols.T @ g2).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, bw)


def group_norm(x: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    """Normalize channels-last activations per (sample, channel group); no affine."""
    bsz, c = x.shape[0], x.shape[-1]
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    xr = x.data.reshape(bsz, -1, groups, c // groups)
    mu = xr.mean(axis=(1, 3), keepdims=True)
    xc = xr - mu
    var = (xc * xc).mean(axis=(1, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    m = xr.shape[1] * xr.shape[3]

    def bw(g):
        gr = g.reshape(xr.shape)
        gsum = gr.sum(axis=(1, 3), keepdims=True)
        gxsum = (gr * xhat).sum(axis=(1, 3), keepdims=True)
        gx = inv * (gr - gsum / m - xhat * gxsum / m)
        return (gx.reshape(x.shape),)

    return _make(xhat.reshape(x.shape), (x,), bw)


def avg_pool2(x: Tensor) -> Tensor:
    bsz, h, w, c = x.shape
    out = x.data.reshape(bsz, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def bw(g):
        g = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        return (g,)

    return _make(out, (x,), bw)


def upsample2(x: Tensor) -> Tensor:
    bsz, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bw(g):
        return (g.reshape(bsz, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def graph_nodes(root: Tensor) -> list[Tensor]:
    """Every tensor that backward from ``root`` would visit, parents first."""
    return _topo_order(root)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if not node.detached:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad or parent.detached:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- gradcheck


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat, gflat = x.reshape(-1), out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(x, dtype=np.float64)).data)
            flat[i] = orig - h
            fm = float(f(Tensor(x, dtype=np.float64)).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError(f"non-finite function value perturbing element {np.unravel_index(i, x.shape)}")
            gflat[i] = (fp - fm) / (2 * h)
    return out


def gradcheck(f: Callable[[Tensor], Tensor], x, h: float = 1e-5, analytic: str = "f64") -> float:
    """Max relative error between backprop and central differences for scalar ``f``.

    The numeric side is always 64-bit. ``analytic="f32"`` runs the backward pass
    in 32-bit instead, which is how the training precision is audited.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    dt = _PRECISIONS[analytic]
    with precision(analytic):
        xt = Tensor(x.astype(dt), requires_grad=True, dtype=dt)
        loss = f(xt)
        if loss.data.size != 1:
            raise ValueError("gradcheck needs a scalar-valued function")
        backward(loss)
        grad = xt.grad if xt.grad is not None else np.zeros_like(x)
        bad = np.argwhere(~np.isfinite(grad))
        if bad.size:
            raise FloatingPointError(f"non-finite analytic gradient at element {tuple(bad[0])}")
    with precision("f64"):
        numeric = numeric_grad(f, x, h)
    err = np.abs(grad.astype(np.float64) - numeric) / np.maximum(np.abs(numeric), 1e-8)
    return float(err.max()) if err.size else 0.0
