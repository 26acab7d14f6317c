import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from disendiff import autodiff as ad
from disendiff.autodiff import Tensor
from disendiff.diffusion import (NoiseSchedule, base_loss, ddim_loop, ddim_sample, forward_noise, guided_eps,
                                 read_ppm, to_uint8, write_ppm)
from disendiff.unet import Denoiser, DenoiserConfig

SCHED = NoiseSchedule()


def test_schedule_values():
    assert SCHED.T == 400
    assert np.all(np.diff(SCHED.alpha_bars) < 0)
    assert SCHED.alpha_bars[0] == pytest.approx(1 - 1e-4, abs=1e-12)
    assert SCHED.betas[-1] == pytest.approx(0.02)


def test_ddim_timesteps_uniform_and_end_at_zero():
    for k in (1, 2, 7, 50, 400):
        ts = SCHED.ddim_timesteps(k)
        assert len(ts) == k and ts[0] == 399
        if k > 1:
            assert ts[-1] == 0 and np.all(np.diff(ts) < 0)
        np.testing.assert_array_equal(ts, SCHED.ddim_timesteps(k))
    with pytest.raises(ValueError):
        SCHED.ddim_timesteps(401)


def test_forward_noise_t0_close_to_x0():
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, (32, 32, 3))
    eps = rng.standard_normal(x0.shape)
    z = forward_noise(x0, 0, eps, SCHED)
    assert np.sqrt(1 - SCHED.alpha_bars[0]) <= 0.01
    a = SCHED.alpha_bars[0]
    assert np.all(np.abs(z - x0) <= np.sqrt(1 - a) * np.abs(eps) + (1 - np.sqrt(a)) * np.abs(x0) + 1e-12)


def test_forward_noise_last_step_is_noise():
    rng = np.random.default_rng(1)
    x0 = rng.uniform(-1, 1, 10_000)
    eps = rng.standard_normal(10_000)
    z = forward_noise(x0, SCHED.T - 1, eps, SCHED)
    assert np.corrcoef(z, eps)[0, 1] > 0.99


def test_forward_noise_linearity_and_tensor_path():
    rng = np.random.default_rng(2)
    x0, eps = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    for t in (0, 37, 399):
        d = forward_noise(2 * x0, t, eps, SCHED) - forward_noise(x0, t, eps, SCHED)
        np.testing.assert_allclose(d, np.sqrt(SCHED.alpha_bars[t]) * x0, atol=1e-12)
        with ad.precision("f64"):
            zt = forward_noise(Tensor(x0), t, Tensor(eps), SCHED)
        np.testing.assert_allclose(zt.data, forward_noise(x0, t, eps, SCHED), atol=1e-12)


def test_forward_noise_per_item_t():
    rng = np.random.default_rng(3)
    x0, eps = rng.standard_normal((3, 2, 2)), rng.standard_normal((3, 2, 2))
    t = np.array([0, 100, 399])
    z = forward_noise(x0, t, eps, SCHED)
    for i in range(3):
        np.testing.assert_allclose(z[i], forward_noise(x0[i], int(t[i]), eps[i], SCHED), atol=1e-12)


def test_forward_noise_rejects_t_out_of_range():
    with pytest.raises(ValueError):
        forward_noise(np.zeros(2), 400, np.zeros(2), SCHED)
    with pytest.raises(ValueError):
        forward_noise(np.zeros(2), -1, np.zeros(2), SCHED)


@pytest.mark.parametrize("t", [0, 50, 200, 399])
def test_forward_noise_variance(t):
    rng = np.random.default_rng(t)
    x0 = rng.standard_normal(10_000) * 0.5
    z = forward_noise(x0, t, rng.standard_normal(10_000), SCHED)
    want = SCHED.alpha_bars[t] * x0.var() + (1 - SCHED.alpha_bars[t])
    assert abs(z.var() - want) <= 0.05 * want


def test_base_loss_examples():
    e = np.random.default_rng(0).standard_normal((2, 3, 4))
    assert float(base_loss(e, e).data) == 0.0
    assert float(base_loss(np.zeros((4, 4)), np.ones((4, 4))).data) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        base_loss(np.zeros(3), np.zeros(4))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_base_loss_matches_straight_line(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 7)), rng.standard_normal((3, 7))
    flat_a, flat_b = a.ravel().tolist(), b.ravel().tolist()
    want = sum((x - y) ** 2 for x, y in zip(flat_a, flat_b)) / len(flat_a)
    got = float(base_loss(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data)
    assert got == pytest.approx(want, rel=1e-12)


def test_guidance_one_collapses_to_conditional():
    rng = np.random.default_rng(0)
    c, u = rng.standard_normal(5), rng.standard_normal(5)
    assert guided_eps(c, u, 1.0) is c
    np.testing.assert_allclose(guided_eps(c, u, 6.0), u + 6.0 * (c - u))
    np.testing.assert_allclose(guided_eps(c, u, 0.0), u)


def _two_point_eps(sched):
    # exact E[eps | z_t] for x0 uniform on {-1, +1}
    def eps_fn(z, t):
        a = sched.alpha_bars[t]
        mean_x0 = np.tanh(np.sqrt(a) * z / (1 - a))
        return (z - np.sqrt(a) * mean_x0) / np.sqrt(1 - a)
    return eps_fn


@pytest.mark.parametrize("clip", [None, 1.0])
def test_ddim_recovers_two_point_modes(clip):
    z = np.random.default_rng(0).standard_normal(200)
    x0 = ddim_loop(_two_point_eps(SCHED), z, SCHED, SCHED.T, clip=clip)
    nearest = np.sign(x0)
    assert np.abs(x0 - nearest).max() <= 1e-2
    # deterministic flow keeps the sign of the starting noise
    np.testing.assert_array_equal(nearest, np.sign(z))


def test_ddim_loop_with_zero_eps_returns_scaled_input():
    # eps = 0 means z_t = sqrt(abar) x0 at every step, so x0 is z / sqrt(abar_T-1)
    z = np.full(3, 0.01)
    out = ddim_loop(lambda zt, t: np.zeros_like(zt), z, SCHED, 10, clip=None)
    np.testing.assert_allclose(out, z / np.sqrt(SCHED.alpha_bars[-1]), rtol=1e-9)


@pytest.fixture(scope="module")
def tiny_model():
    cfg = DenoiserConfig(base_channels=8, time_embed_dim=16, embed_dim=8, groups=4)
    return Denoiser.create(cfg, seed=0)


def test_sample_determinism_and_range(tiny_model):
    a = ddim_sample(tiny_model, "V1* disc", steps=3, guidance=6.0, seed=7)
    b = ddim_sample(tiny_model, "V1* disc", steps=3, guidance=6.0, seed=7)
    assert a.shape == (32, 32, 3) and a.dtype == np.float32
    assert a.tobytes() == b.tobytes()
    assert a.min() >= -1 and a.max() <= 1
    c = ddim_sample(tiny_model, "V1* disc", steps=3, guidance=6.0, seed=8)
    assert c.tobytes() != a.tobytes()


def test_sample_output_shapes(tiny_model):
    batch = ddim_sample(tiny_model, "a ring", steps=2, guidance=1.0, seed=3, n=2)
    assert batch.shape == (2, 32, 32, 3)
    single = ddim_sample(tiny_model, "a ring", steps=2, guidance=1.0, seed=3, return_all=True)
    assert single.shape == (1, 32, 32, 3)


def test_sample_rejects_too_many_steps(tiny_model):
    with pytest.raises(ValueError):
        ddim_sample(tiny_model, "a disc", steps=401)


def test_ppm_round_half_up(tmp_path):
    # -1 -> 0, 1 -> 255, the exact midpoint 127.5 rounds up to 128
    np.testing.assert_array_equal(to_uint8(np.array([-1.0, 1.0, 0.0, -2.0, 2.0])), [0, 255, 128, 0, 255])
    img = np.zeros((2, 3, 3))
    img[0, 0] = 1.0
    write_ppm(tmp_path / "x.ppm", img)
    raw = (tmp_path / "x.ppm").read_bytes()
    assert raw.startswith(b"P6\n3 2\n255\n") and len(raw) == len(b"P6\n3 2\n255\n") + 18
    pix = read_ppm(tmp_path / "x.ppm")
    assert pix.shape == (2, 3, 3) and pix[0, 0].tolist() == [255] * 3 and pix[1, 2].tolist() == [128] * 3
