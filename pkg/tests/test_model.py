import numpy as np
import pytest

import _reference as ref
from direcformer import tensor as tn
from direcformer.checks import _active_model
from direcformer.model import (ConfigError, DirecFormer, ModelConfig, attention_weights,
                               load_checkpoint, patchify, save_checkpoint)
from direcformer.synth import VideoClip
from direcformer.tensor import Tensor


def small_cfg(**kw):
    base = dict(depth=2, frames=4, height=16, width=16, channels=1, patch=8, dim=32, heads=2,
                mlp_hidden=48, classes=5, order_classes=7)
    base.update(kw)
    return ModelConfig(**base)


def params_of(model):
    return {k: v.data for k, v in model.params.items()}


def clip_for(cfg, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (cfg.frames, cfg.height, cfg.width, cfg.channels))


# -- patchify / config -----------------------------------------------------------
def test_patchify_counts_and_raster_order():
    px = np.arange(16, dtype=float).reshape(1, 4, 4, 1)
    out = patchify(px, 2)
    assert out.shape == (1, 4, 4)
    # patch s = (u // P) * (W / P) + v // P, intra-patch offsets row-major
    np.testing.assert_array_equal(out[0, 1], [2, 3, 6, 7])
    np.testing.assert_array_equal(out[0, 2], [8, 9, 12, 13])


def test_patchify_channels_interleaved_last():
    px = np.arange(2 * 2 * 3, dtype=float).reshape(1, 2, 2, 3)
    np.testing.assert_array_equal(patchify(px, 2)[0, 0], np.arange(12))


def test_paper_scale_patch_counts():
    cfg = ModelConfig.paper_scale()
    assert cfg.num_patches == 196 and cfg.head_dim == 64
    with pytest.raises(ConfigError):
        ModelConfig.paper_scale(patch=18)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(dim=30, heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(time_mode="linear")
    assert small_cfg(time_mode="softmax", space_mode="cosine").cell == "S-C"


def test_config_text_roundtrip():
    cfg = small_cfg(time_mode="softmax")
    assert ModelConfig.from_text(cfg.to_text()) == cfg


# -- embedding ----------------------------------------------------------------
def test_embed_zero_weights_and_table():
    cfg = small_cfg()
    m = DirecFormer(cfg, seed=0)
    m.params["patch_embed.weight"].data[...] = 0
    z = m.embed(patchify(clip_for(cfg)[None], cfg.patch))
    assert not z.data[0, 1:].any()
    np.testing.assert_array_equal(z.data[0, 0], m.params["cls_token"].data)
    e = np.random.default_rng(1).standard_normal(m.params["pos_embed"].shape)
    m.params["pos_embed"].data[...] = e
    z = m.embed(patchify(clip_for(cfg)[None], cfg.patch))
    np.testing.assert_array_equal(z.data[0, 1:], e[1:])


def test_embed_matches_composition():
    cfg = small_cfg()
    m = _active_model(cfg, 3)
    p = params_of(m)
    x = clip_for(cfg, 4)
    z = m.embed(patchify(x[None], cfg.patch)).data[0]
    np.testing.assert_allclose(z, np.array(ref.embed(cfg, p, x)), atol=1e-12)


# -- attention weights ------------------------------------------------------------
def test_cosine_parallel_rows_are_ones():
    k = Tensor(np.random.default_rng(0).standard_normal((1, 4)))
    a = attention_weights(Tensor(np.tile(k.data * 3, (2, 1))), Tensor(np.tile(k.data, (3, 1))), "cosine", 4)
    np.testing.assert_allclose(a.data, 1.0, atol=1e-15)


def test_softmax_and_cosine_differ_when_negative():
    rng = np.random.default_rng(1)
    q, k = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((5, 4)))
    c = attention_weights(q, k, "cosine", 4).data
    s = attention_weights(q, k, "softmax", 4).data
    assert (c < 0).any() and not np.allclose(c, s)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


# -- stages against the scalar oracle ------------------------------------------
@pytest.mark.parametrize("mode", ["cosine", "softmax"])
def test_stages_match_scalar_oracle_small(mode):
    cfg = ModelConfig(depth=1, frames=3, height=2, width=4, channels=1, patch=2, dim=4, heads=1,
                      mlp_hidden=6, classes=3, order_classes=2, time_mode=mode, space_mode=mode)
    m = _active_model(cfg, 5)
    p = params_of(m)
    x = clip_for(cfg, 6)
    z0 = m.embed(patchify(x[None], cfg.patch))
    zt, a = m.temporal_attention(z0, 0)
    want_t, trace = ref.temporal(cfg, p, 0, ref.embed(cfg, p, x))
    np.testing.assert_allclose(zt.data[0], np.array(want_t), atol=1e-10)
    # trace layout: (B, heads, N, T, T+1), query (s, t)
    N = cfg.num_patches
    for s in range(N):
        for t in range(cfg.frames):
            np.testing.assert_allclose(a.data[0, 0, s, t], trace[(1 + t * N + s, 0)], atol=1e-12)
    zs, _, _ = m.spatial_attention(zt, 0)
    want_s, _ = ref.spatial(cfg, p, 0, want_t)
    np.testing.assert_allclose(zs.data[0], np.array(want_s), atol=1e-10)


def test_single_frame_temporal_two_key_oracle():
    cfg = ModelConfig(depth=1, frames=1, height=2, width=2, channels=1, patch=2, dim=4, heads=1,
                      mlp_hidden=4, classes=2, order_classes=1)
    m = _active_model(cfg, 7)
    p = params_of(m)
    z = m.embed(patchify(clip_for(cfg, 8)[None], cfg.patch))
    out, a = m.temporal_attention(z, 0)
    zz = [z.data[0, 0], z.data[0, 1]]
    pr = lambda role, x: ref.proj(cfg, p, "blocks.0.time", role, x)
    q = pr("q", zz[1])
    a0, a1 = ref.cos(q / 2.0, pr("k", zz[0])), ref.cos(q / 2.0, pr("k", zz[1]))
    s = a0 * pr("v", zz[0]) + a1 * pr("v", zz[1])
    want = zz[1] + s @ p["blocks.0.time.out.weight"] + p["blocks.0.time.out.bias"]
    np.testing.assert_allclose(a.data[0, 0, 0, 0], [a0, a1], atol=1e-12)
    np.testing.assert_allclose(out.data[0, 1], want, atol=1e-12)
    np.testing.assert_array_equal(out.data[0, 0], zz[0])


@pytest.mark.parametrize("mode", [("cosine", "cosine"), ("softmax", "cosine"), ("cosine", "softmax")])
def test_full_network_matches_scalar_oracle(mode):
    cfg = small_cfg(time_mode=mode[0], space_mode=mode[1])
    m = _active_model(cfg, 11)
    p = params_of(m)
    x = clip_for(cfg, 12)
    y, i, trace = m(VideoClip(x, 0))
    ry, ri, rtrace = ref.forward(cfg, p, x)
    np.testing.assert_allclose(y.data, ry, atol=1e-8)
    np.testing.assert_allclose(i.data, ri, atol=1e-8)
    assert y.shape == (cfg.classes,) and trace.depth == cfg.depth


# -- structural properties ------------------------------------------------------
def test_residual_identity_when_outputs_zeroed():
    cfg = small_cfg()
    m = _active_model(cfg, 2)
    for name, p in m.params.items():
        if ".out." in name or ".fc2." in name:
            p.data[...] = 0
    x = clip_for(cfg)[None]
    z0 = m.embed(patchify(x, cfg.patch)).data
    z, _ = m.encode(x)
    np.testing.assert_array_equal(z.data, z0)


def test_stage_identities():
    cfg = small_cfg()
    m = _active_model(cfg, 2)
    z = m.embed(patchify(clip_for(cfg)[None], cfg.patch))
    for stage in ("time", "space"):
        m.params[f"blocks.0.{stage}.out.weight"].data[...] = 0
        m.params[f"blocks.0.{stage}.out.bias"].data[...] = 0
    m.params["blocks.0.mlp.fc2.weight"].data[...] = 0
    m.params["blocks.0.mlp.fc2.bias"].data[...] = 0
    zt, _ = m.temporal_attention(z, 0)
    zs, _, _ = m.spatial_attention(zt, 0)
    np.testing.assert_array_equal(zt.data, z.data)
    np.testing.assert_array_equal(zs.data, z.data)
    np.testing.assert_array_equal(m.mlp(zs, 0).data, z.data)


def test_identity_second_block_matches_one_block():
    cfg2 = small_cfg(depth=2)
    m2 = _active_model(cfg2, 4)
    for name, p in m2.params.items():
        if name.startswith("blocks.1.") and (".out." in name or ".fc2." in name):
            p.data[...] = 0
    m1 = DirecFormer(small_cfg(depth=1), {k: v.data for k, v in m2.params.items()
                                          if not k.startswith("blocks.1.")})
    x = clip_for(cfg2)[None]
    np.testing.assert_array_equal(m1(x)[0].data, m2(x)[0].data)


def test_cosine_trace_bounded_and_softmax_rows_normalized():
    for mode in ("cosine", "softmax"):
        cfg = small_cfg(time_mode=mode, space_mode=mode)
        _, _, trace = _active_model(cfg, 1)(clip_for(cfg)[None])
        for a in trace.temporal + trace.spatial + trace.spatial_cls:
            if mode == "cosine":
                assert np.all(np.abs(a.data) <= 1 + 1e-12)
            else:
                np.testing.assert_allclose(a.data.sum(axis=-1), 1.0, atol=1e-10)


def _temporal_asymmetry(model, x):
    _, _, trace = model(x)
    a = trace.temporal[0].data[..., 1:]  # (B, h, N, T, T)
    return np.abs(a - np.swapaxes(a, -1, -2)).max()


def test_tied_projections_give_symmetric_temporal_attention():
    cfg = ModelConfig(depth=1, dtype="float64")
    m = DirecFormer(cfg, seed=0)
    x = clip_for(cfg)[None]
    assert _temporal_asymmetry(m, x) > 0.01
    for part in ("ln.gain", "ln.bias", "weight", "bias"):
        m.params[f"blocks.0.time.k.{part}"].data[...] = m.params[f"blocks.0.time.q.{part}"].data
    assert _temporal_asymmetry(m, x) <= 1e-10


def test_q_rescaling_leaves_cosine_trace_unchanged():
    cfg = small_cfg()
    m = _active_model(cfg, 9)
    x = clip_for(cfg)[None]
    _, _, t1 = m(x)
    for part in ("weight", "bias"):
        m.params[f"blocks.0.time.q.{part}"].data[...] *= 3.7
    _, _, t2 = m(x)
    np.testing.assert_allclose(t2.temporal[0].data, t1.temporal[0].data, atol=1e-12)


def test_frame_permutation_equivariance():
    cfg = small_cfg(depth=1)
    m = _active_model(cfg, 6)
    N = cfg.num_patches
    pos = m.params["pos_embed"].data
    pos[1:] = np.tile(pos[1:1 + N], (cfg.frames, 1))  # same embedding in every frame
    x = clip_for(cfg, 3)
    pi = np.array([2, 0, 3, 1])
    _, _, ta = m(x[None])
    _, _, tb = m(x[pi][None])
    a, b = ta.temporal[0].data[0], tb.temporal[0].data[0]  # (h, N, T, T+1)
    np.testing.assert_allclose(b[:, :, :, 1:], a[:, :, pi][:, :, :, 1 + pi], atol=1e-13)
    np.testing.assert_allclose(b[..., 0], a[:, :, pi, 0], atol=1e-13)


def test_zero_class_head_is_uniform():
    cfg = small_cfg()
    m = _active_model(cfg, 0)
    m.params["head_cls.weight"].data[...] = 0
    m.params["head_cls.bias"].data[...] = 0
    y, _, _ = m(clip_for(cfg)[None])
    p = np.exp(y.data) / np.exp(y.data).sum()
    np.testing.assert_allclose(p, 1 / cfg.classes)


def test_shape_mismatch_is_config_error():
    cfg = small_cfg()
    with pytest.raises(ConfigError):
        DirecFormer(cfg)(np.zeros((1, 3, 16, 16, 1)))


def test_init_conventions():
    m = DirecFormer(ModelConfig(), seed=0)
    assert not m.params["pos_embed"].data.any()
    assert not m.params["blocks.0.time.out.weight"].data.any()
    assert not m.params["blocks.1.space.out.weight"].data.any()
    w = m.params["blocks.0.time.q.weight"].data
    assert np.abs(w).max() <= 0.04 and 0.015 < w.std() < 0.025


def test_checkpoint_roundtrip(tmp_path):
    cfg = small_cfg()
    m = _active_model(cfg, 5)
    extra = {"perm_set": np.arange(8.).reshape(2, 4)}
    save_checkpoint(tmp_path / "m.ckpt", m, {"epoch": 3}, extra)
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert ck.model.cfg == cfg and ck.meta == {"epoch": "3"}
    np.testing.assert_array_equal(ck.extras["perm_set"], extra["perm_set"])
    for k, v in m.params.items():
        assert ck.model.params[k].data.tobytes() == v.data.tobytes()
    x = clip_for(cfg)[None]
    assert ck.model(x)[0].data.tobytes() == m(x)[0].data.tobytes()


def test_gradient_reaches_every_parameter():
    cfg = small_cfg()
    m = _active_model(cfg, 1)
    y, i, _ = m(clip_for(cfg)[None])
    tn.backward(tn.cross_entropy(y, [1]) + tn.cross_entropy(i, [2]))
    missing = [k for k, p in m.params.items() if p.grad is None or not np.any(p.grad)]
    assert missing == []
