"""Randomized finite-difference checks for every differentiable piece of the calibration path."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .attention import AttentionMap, AttentionRecord, cross_attention, select_maps
from .autodiff import Tensor
from .calibration import (CalibrationConfig, calibration_loss, gaussian_smooth, l_bind, l_separate, l_ss,
                          suppress, _prepare)
from .diffusion import base_loss
from .tokens import klass, modifier, tokenize

TOLERANCE = 1e-4
KINK_GAP = 1e-3  # min/max pairs closer than this are nudged apart; FD is meaningless at a switch point


def _maps(rng, *shape):
    return np.exp(rng.standard_normal(shape)) * 0.1


def _separate(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return b moved away from a wherever the two nearly tie."""
    close = np.abs(a - b) < KINK_GAP
    return np.where(close, b + 2 * KINK_GAP, b)


def _weights(rng, shape):
    # magnitudes bounded away from 0 so no element's true gradient drowns in FD roundoff
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(0.5, 1.5, shape)


def check_bind(rng, kind="minmax", analytic="f64") -> float:
    a_m = _maps(rng, 8, 8)
    a_c = Tensor(_separate(a_m, _maps(rng, 8, 8)), dtype=np.float64)
    return ad.gradcheck(lambda x: l_bind(x, a_c, kind), a_m, analytic=analytic)


def _pair(rng):
    a = _maps(rng, 8, 8)
    return np.stack([a, _separate(a, _maps(rng, 8, 8))])


def check_separate(rng, analytic="f64") -> float:
    return ad.gradcheck(lambda x: l_separate(x[0], x[1]), _pair(rng), analytic=analytic)


def check_ss(rng, kind="minmax", analytic="f64") -> float:
    return ad.gradcheck(lambda x: l_ss(x[0], x[1], kind), _pair(rng), analytic=analytic)


def check_gaussian(rng, analytic="f64") -> float:
    a = _maps(rng, 2, 8, 8)
    w = _weights(rng, a.shape)
    return ad.gradcheck(lambda x: ad.sum_(ad.mul(gaussian_smooth(x), Tensor(w))), a, analytic=analytic)


def check_suppress(rng, analytic="f64") -> float:
    a = rng.uniform(0.2, 1.0, (8, 8))
    w = _weights(rng, a.shape)
    return ad.gradcheck(lambda x: ad.sum_(ad.mul(suppress(x, 2), Tensor(w))), a, analytic=analytic)


def check_cross_attention(rng, analytic="f64") -> float:
    """Gradient w.r.t. W_K and W_V (stacked) of a random linear read-out of out and maps."""
    c, e, hd = 6, 5, 4
    phi = Tensor(rng.standard_normal((2, 3, 3, c)))
    tau = Tensor(rng.standard_normal((2, 4, e)))
    w_q = Tensor(rng.standard_normal((c, hd)) * 0.5)
    x0 = rng.standard_normal((2, e, hd)) * 0.5
    r_out = Tensor(rng.standard_normal((2, 3, 3, hd)))
    r_map = Tensor(rng.standard_normal((2, 2, 3, 3, 4)))

    def f(x):
        out, maps = cross_attention(phi, tau, w_q, x[0], x[1], heads=2)
        return ad.add(ad.sum_(ad.mul(out, r_out)), ad.sum_(ad.mul(maps, r_map)))

    return ad.gradcheck(f, x0, analytic=analytic)


def check_base_loss(rng, analytic="f64") -> float:
    eps = Tensor(rng.standard_normal((2, 4, 4, 3)))
    return ad.gradcheck(lambda x: base_loss(eps, x), rng.standard_normal((2, 4, 4, 3)), analytic=analytic)


CAL_PROMPT = "V1* disc and V2* square"
CAL_RES = 4


def _record(values: Tensor) -> AttentionRecord:
    seq = tokenize(CAL_PROMPT)
    return AttentionRecord([AttentionMap(values, CAL_RES, "layer")], [seq] * values.shape[0])


def _softmax_maps(rng) -> np.ndarray:
    logits = rng.standard_normal((1, 1, CAL_RES, CAL_RES, 8)) * 1.5
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def detached_reference(values0: np.ndarray, cfg: CalibrationConfig) -> Callable[[Tensor], Tensor]:
    """The calibration loss as a plain function of the maps, with bind targets frozen at ``values0``.

    Its ordinary derivative is what backprop through the detached graph must produce.
    """
    frozen = _record(Tensor(values0))
    targets = []
    for i in (1, 2):
        a_c = suppress(_prepare(_select(frozen, klass(i)), cfg), cfg.suppression_count)
        targets.append(Tensor(a_c.data))
    no_bind = CalibrationConfig(**{**cfg.__dict__, "use_bind": False})

    def f(x: Tensor) -> Tensor:
        rec = _record(x)
        total = calibration_loss(rec, no_bind)
        for i in (1, 2):
            a_m = _prepare(_select(rec, modifier(i)), cfg)
            total = ad.add(total, ad.mul(ad.mean(l_bind(a_m, targets[i - 1], cfg.iou_kind)), cfg.lambda_bind))
        return total

    return f


def _select(record: AttentionRecord, role) -> Tensor:
    return select_maps(record, role, CAL_RES)


def check_calibration(rng, analytic="f64", cfg: CalibrationConfig | None = None) -> float:
    """Backprop through the detached graph vs finite differences of :func:`detached_reference`."""
    cfg = cfg or CalibrationConfig(resolution=CAL_RES)
    x0 = _softmax_maps(rng)
    dt = np.float64 if analytic == "f64" else np.float32
    with ad.precision(analytic):
        xt = Tensor(x0.astype(dt), requires_grad=True, dtype=dt)
        ad.backward(calibration_loss(_record(xt), cfg))
        grad = xt.grad.astype(np.float64)
    with ad.precision("f64"):
        numeric = ad.numeric_grad(detached_reference(x0, cfg), x0)
    err = np.abs(grad - numeric) / np.maximum(np.abs(numeric), 1e-8)
    return float(err.max())


CHECKS: dict[str, Callable] = {
    "l_bind": check_bind,
    "l_separate": check_separate,
    "l_ss": check_ss,
    "calibration_loss": check_calibration,
    "gaussian_smooth": check_gaussian,
    "suppress": check_suppress,
    "cross_attention": check_cross_attention,
    "base_loss": check_base_loss,
}


def run_suite(seeds: int = 100, names=None, analytic: str = "f64") -> dict[str, tuple[float, int]]:
    """{check: (max relative error over seeds, worst seed)}."""
    results = {}
    for name in names or CHECKS:
        worst, worst_seed = 0.0, 0
        for s in range(seeds):
            err = CHECKS[name](np.random.default_rng(s), analytic=analytic)
            if err > worst:
                worst, worst_seed = err, s
        results[name] = (worst, worst_seed)
    return results
