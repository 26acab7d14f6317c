import subprocess
from dataclasses import replace

import numpy as np
import pytest

from disendiff import autodiff as ad
from disendiff.autodiff import Tensor, gradcheck
from disendiff.checkpoint import (MAGIC, cfg_path, dumps, file_hash, git_blob_hash, load_model, loads, save_model)
from disendiff.config import dump_kv, load_kv, parse_kv
from disendiff.tokens import VOCAB, tokenize
from disendiff.unet import CONTEXT_NAME, EMBED_NAME, Denoiser, DenoiserConfig, is_personalization_param, param_specs

TINY = DenoiserConfig(base_channels=8, time_embed_dim=16, embed_dim=8, groups=4)


def _jittered(cfg=TINY, seed=0):
    # zero-initialised output projections would make most gradients vanish
    model = Denoiser.create(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in model.params.values():
        p.data = (p.data + 0.2 * rng.standard_normal(p.shape)).astype(np.float32)
    return model


def _inputs(model, b=2, seed=1, prompt="V1* disc and V2* square"):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((b, 32, 32, 3)).astype(np.float32)
    seqs = [tokenize(prompt)] * b
    return z, seqs


def test_output_shape_and_attention_record():
    for cfg in (TINY, DenoiserConfig(base_channels=8, time_embed_dim=16, embed_dim=8, groups=4,
                                     attention_resolutions=(16, 8))):
        model = Denoiser.create(cfg, seed=0)
        z, seqs = _inputs(model, b=3)
        eps, rec = model(Tensor(z), np.array([0, 5, 399]), model.encode(seqs), seqs)
        assert eps.shape == z.shape
        assert sorted({m.resolution for m in rec.maps}) == sorted(cfg.attention_resolutions)
        for m in rec.maps:
            assert m.values.shape == (3, cfg.heads, m.resolution, m.resolution, 8)


def test_forward_is_deterministic():
    model = _jittered()
    z, seqs = _inputs(model)
    a, _ = model(Tensor(z), 17, model.encode(seqs), seqs)
    b, _ = model(Tensor(z), 17, model.encode(seqs), seqs)
    assert a.data.tobytes() == b.data.tobytes()


def test_timestep_out_of_range():
    model = Denoiser.create(TINY)
    z, seqs = _inputs(model)
    for t in (400, -1):
        with pytest.raises(ValueError, match="timestep"):
            model(Tensor(z), t, model.encode(seqs), seqs)


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(attention_resolutions=(8,))
    with pytest.raises(ValueError):
        DenoiserConfig(resolutions=(32, 16))


def test_parameter_names_stable():
    a, b = Denoiser.create(TINY, seed=0), Denoiser.create(TINY, seed=5)
    assert list(a.params) == list(b.params) == list(param_specs(TINY))
    assert a.num_parameters() == b.num_parameters()
    assert Denoiser.create(seed=0).num_parameters() == Denoiser.create(seed=1).num_parameters()


def test_freeze_flags():
    model = Denoiser.create(TINY)
    model.freeze_for_personalization()
    trainable = set(model.trainable())
    assert EMBED_NAME in trainable
    assert trainable == {n for n in model.params if is_personalization_param(n)}
    assert all(n.endswith(("W_K", "W_V")) for n in trainable - {EMBED_NAME})
    # one attention layer by default: the embedding plus W_K and W_V of down16.attn
    assert len(trainable) == 1 + 2
    np.testing.assert_array_equal(model.row_masks[EMBED_NAME], VOCAB.modifier_ids)
    model.freeze_for_personalization(train_wq=True)
    assert {n for n in model.trainable() if n.endswith("W_Q")} == {n for n in model.params if n.endswith("W_Q")}
    model.unfreeze_all()
    assert set(model.trainable()) == set(model.params) and not model.row_masks


def test_attention_layout():
    layouts = {(16,): [("down16.attn", 16)],
               (16, 8): [("down16.attn", 16), ("down8.attn", 8), ("mid8.attn", 8)]}
    for res, expect in layouts.items():
        model = Denoiser.create(replace(TINY, attention_resolutions=res))
        z, seqs = _inputs(model)
        _, rec = model(Tensor(z), 3, model.encode(seqs), seqs)
        assert [(m.layer, m.resolution) for m in rec.maps] == expect


def test_text_context_encoding():
    cfg = DenoiserConfig(base_channels=8, time_embed_dim=16, embed_dim=8, groups=4, text_context=True)
    model = Denoiser.create(cfg, seed=2)
    seq = tokenize("V1* disc and a red square")
    tau = model.encode([seq]).data[0]
    table, w = model.params[EMBED_NAME].data, model.params[CONTEXT_NAME].data
    ids = list(seq.ids)
    pad = VOCAB.id("<pad>")
    for i, tok in enumerate(ids):
        expect = table[tok].astype(np.float64)
        if i > 0 and tok != pad:
            expect = expect + table[ids[i - 1]] @ w
        np.testing.assert_allclose(tau[i], expect, rtol=1e-5, atol=1e-6)
    # the class token after a modifier sees it, so modifier rows steer the class key
    assert not np.allclose(tau[1], table[VOCAB.id("disc")])
    assert not is_personalization_param(CONTEXT_NAME)
    plain = Denoiser.create(replace(TINY, text_context=False), seed=2)
    assert CONTEXT_NAME not in plain.params
    np.testing.assert_array_equal(plain.encode([seq]).data[0], plain.params[EMBED_NAME].data[ids])


def test_wv_gradcheck_32bit():
    base = _jittered(seed=3)
    name = "down16.attn.W_V"
    z, seqs = _inputs(base, b=1)
    readout = np.random.default_rng(9).uniform(0.5, 1.5, z.shape) * np.sign(
        np.random.default_rng(10).standard_normal(z.shape))
    models = {np.float32: base, np.float64: base.astype(np.float64)}

    def f(w):
        m = models[w.data.dtype.type]
        m.params[name] = w
        eps, _ = m(Tensor(z), 123, m.encode(seqs), seqs)
        return ad.sum_(ad.mul(eps, Tensor(readout)))

    err = gradcheck(f, base.params[name].data, h=1e-4, analytic="f32")
    assert err < 1e-3


def test_dsdf_round_trip_and_layout(tmp_path):
    model = _jittered()
    save_model(tmp_path / "m.dsdf", model)
    raw = (tmp_path / "m.dsdf").read_bytes()
    assert raw[:4] == MAGIC
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == len(model.params)
    name_len = int.from_bytes(raw[12:14], "little")
    assert raw[14:14 + name_len].decode() == next(iter(model.params))
    again = load_model(tmp_path / "m.dsdf")
    assert again.cfg == model.cfg
    for k, v in model.params.items():
        assert again.params[k].data.tobytes() == v.data.tobytes()
    assert dumps(again.state_dict()) == raw


def test_dsdf_errors():
    raw = dumps({"a": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.float32(2.5)})
    state = loads(raw)
    np.testing.assert_array_equal(state["a"], np.arange(6).reshape(2, 3))
    assert state["s"].shape == () and state["s"] == 2.5
    with pytest.raises(ValueError, match="magic"):
        loads(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="version"):
        loads(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(ValueError, match="trailing"):
        loads(raw + b"\0")


def test_load_state_mismatch():
    model = Denoiser.create(TINY)
    state = model.state_dict()
    state.pop("conv_in.b")
    with pytest.raises(KeyError):
        Denoiser(cfg=TINY).load_state_dict(state)
    state = model.state_dict()
    state["conv_in.b"] = np.zeros(3, np.float32)
    with pytest.raises(ValueError):
        Denoiser(cfg=TINY).load_state_dict(state)


def test_git_blob_hash_matches_git(tmp_path):
    path = tmp_path / "blob.bin"
    path.write_bytes(b"hello\x00world\n" * 3)
    want = subprocess.run(["git", "hash-object", str(path)], capture_output=True, text=True, check=True)
    assert file_hash(path) == want.stdout.strip()
    # well-known hash of the empty blob
    assert git_blob_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


def test_kv_config(tmp_path):
    values = parse_kv("# header\na = 1\nb = 2.5e-3  # trailing\nc = true\nd = (16, 8)\ne = 'x'\nf = plain\n")
    assert values == {"a": 1, "b": 2.5e-3, "c": True, "d": (16, 8), "e": "x", "f": "plain"}
    with pytest.raises(ValueError, match="line 1"):
        parse_kv("nonsense")
    dump_kv(tmp_path / "c.cfg", TINY.to_dict())
    assert DenoiserConfig(**load_kv(tmp_path / "c.cfg")) == TINY
    assert cfg_path(tmp_path / "m.dsdf").name == "m.dsdf.cfg"
