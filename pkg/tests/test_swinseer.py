from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lungvit.diffcore import DiffArray, backward, finite_difference_check, moveaxis, sum_
from lungvit.swinseer import (
    GeneratorConfig,
    IdentityGenerator,
    InputEmbedding,
    PatchMerge,
    SkipSet,
    SwinBlockPair,
    SwinSEER,
    WindowAttention,
    build_generator,
    generator_forward,
    relative_position_index,
    se_recalibrate,
    space_to_depth,
    window_partition,
    window_reverse,
)


def _field(rng, n=1, e=4, c=3, dtype=np.float64):
    return DiffArray(rng.standard_normal((n, e, e, e, c)).astype(dtype))


def _to64(module):
    for p in module.parameters():
        p.data = p.data.astype(np.float64)
    return module


# ---------------------------------------------------------------------------
# window partitioning


@pytest.mark.parametrize("window,shift,e", [(2, 0, 4), (2, 1, 4), (4, 0, 8), (4, 2, 8), (2, 1, 6)])
def test_window_round_trip_bit_exact(rng, window, shift, e):
    x = _field(rng, 2, e, 3, np.float32)
    w = window_partition(x, window, shift)
    back = window_reverse(w, window, shift, x.shape)
    assert back.data.tobytes() == x.data.tobytes()


def test_window_count_unshifted():
    w = window_partition(DiffArray(np.zeros((1, 4, 4, 4, 1))), 2, 0)
    assert w.shape == (8, 8, 1)


def test_shifted_windows_match_roll_then_tile_oracle():
    e, W, s = 4, 2, 1
    labels = np.arange(e**3, dtype=np.float64).reshape(1, e, e, e, 1)
    got = window_partition(DiffArray(labels), W, s).data[..., 0]
    rolled = np.roll(labels[0, ..., 0], (-s, -s, -s), (0, 1, 2))
    expected = []
    for bx in range(e // W):
        for by in range(e // W):
            for bz in range(e // W):
                block = rolled[bx * W : (bx + 1) * W, by * W : (by + 1) * W, bz * W : (bz + 1) * W]
                expected.append(block.reshape(-1))
    np.testing.assert_array_equal(got, np.array(expected))


def test_window_partition_rejects_indivisible():
    with pytest.raises(ValueError, match="axis"):
        window_partition(DiffArray(np.zeros((1, 4, 5, 4, 1))), 2)


def test_relative_position_index_range():
    idx = relative_position_index(3)
    assert idx.shape == (27, 27)
    assert idx.min() == 0 and idx.max() == 5**3 - 1
    assert np.all(np.diag(idx) == idx[0, 0])


# ---------------------------------------------------------------------------
# attention


def _dense_attention(attn: WindowAttention, tokens: np.ndarray) -> np.ndarray:
    b, t, c = tokens.shape
    h, d = attn.heads, c // attn.heads
    qkv = tokens @ attn.qkv.weight.data.T + attn.qkv.bias.data
    q, k, v = (qkv[..., i * c : (i + 1) * c].reshape(b, t, h, d).transpose(0, 2, 1, 3) for i in range(3))
    s = q @ k.transpose(0, 1, 3, 2) / np.sqrt(d)
    s = np.exp(s - s.max(-1, keepdims=True))
    s /= s.sum(-1, keepdims=True)
    out = (s @ v).transpose(0, 2, 1, 3).reshape(b, t, c)
    return out @ attn.proj.weight.data.T + attn.proj.bias.data


def test_whole_field_window_equals_global_attention(rng):
    attn = _to64(WindowAttention(rng, 4, 2, 4))
    attn.bias_table.data[...] = 0.0
    x = _field(rng, 2, 4, 4)
    got = window_reverse(attn(window_partition(x, 4, 0)), 4, 0, x.shape).data
    want = _dense_attention(attn, x.data.reshape(2, 64, 4)).reshape(x.shape)
    assert np.abs(got - want).max() < 1e-5


def test_single_token_window_is_value_projection(rng):
    attn = _to64(WindowAttention(rng, 4, 2, 1))
    attn.bias_table.data[...] = 0.0
    tokens = rng.standard_normal((5, 1, 4))
    v = (tokens @ attn.qkv.weight.data.T + attn.qkv.bias.data)[..., 8:]
    want = v @ attn.proj.weight.data.T + attn.proj.bias.data
    np.testing.assert_allclose(attn(DiffArray(tokens)).data, want, atol=1e-12)


def test_constant_bias_offset_leaves_attention_unchanged(rng):
    attn = _to64(WindowAttention(rng, 6, 3, 2))
    w = DiffArray(rng.standard_normal((4, 8, 6)))
    before = attn(w).data
    attn.bias_table.data += 3.7
    np.testing.assert_allclose(attn(w).data, before, atol=1e-10)


def test_attention_heads_must_divide_width(rng):
    with pytest.raises(ValueError, match="divisible"):
        WindowAttention(rng, 6, 4, 2)


# ---------------------------------------------------------------------------
# swin block pair


def test_block_pair_with_zeroed_sublayers_is_identity(rng):
    pair = SwinBlockPair(rng, 4, 2, 2, 4)
    for name, p in pair.named_parameters():
        if "proj" in name or "fc2" in name:
            p.data[...] = 0.0
    x = _field(rng, 1, 4, 4, np.float32)
    assert pair(x).data.tobytes() == x.data.tobytes()


def test_block_pair_shape_contract(rng):
    pair = SwinBlockPair(rng, 8, 2, 2, 4)
    x = _field(rng, 2, 4, 8, np.float32)
    assert pair(x).shape == x.shape


def test_block_pair_gradient_finite_differences(rng):
    pair = SwinBlockPair(np.random.default_rng(3), 4, 2, 2, 2)
    x = rng.standard_normal((1, 4, 4, 4, 4))
    assert finite_difference_check(lambda a: sum_(pair(a) * pair(a)), x.astype(np.float32)) < 1e-3
    _to64(pair)
    assert finite_difference_check(lambda a: sum_(pair(a) * pair(a)), x, 1e-5) < 1e-6


# ---------------------------------------------------------------------------
# embedding and merging


def test_patch_merge_shapes(rng):
    merge = PatchMerge(rng, 4)
    out = merge(_field(rng, 1, 8, 4, np.float32))
    assert out.shape == (1, 4, 4, 4, 8)


def test_patch_merge_constant_stays_constant(rng):
    merge = PatchMerge(rng, 3)
    x = DiffArray(np.ones((1, 4, 4, 4, 3)) * np.array([0.5, -1.0, 2.0]))
    out = merge(x).data
    np.testing.assert_allclose(out, np.broadcast_to(out[0, 0, 0, 0], out.shape), atol=1e-6)


def test_space_to_depth_neighbour_order():
    c = 2
    x = np.arange(4 * 4 * 4 * c, dtype=np.float64).reshape(1, 4, 4, 4, c)
    out = space_to_depth(DiffArray(x)).data
    for bx, by, bz in np.ndindex(2, 2, 2):
        for dx, dy, dz, ch in np.ndindex(2, 2, 2, c):
            k = ((dx * 2 + dy) * 2 + dz) * c + ch
            assert out[0, bx, by, bz, k] == x[0, 2 * bx + dx, 2 * by + dy, 2 * bz + dz, ch]


def test_patch_merge_identity_block_enumerates_neighbours(rng):
    merge = PatchMerge(rng, 1, out_width=8)
    merge.reduce.weight.data[...] = np.eye(8)
    x = np.arange(64, dtype=np.float32).reshape(1, 4, 4, 4, 1)
    out = merge(DiffArray(x)).data
    np.testing.assert_array_equal(out, space_to_depth(DiffArray(x)).data)
    assert list(out[0, 0, 0, 0]) == [0, 1, 4, 5, 16, 17, 20, 21]


def test_embedding_constant_input_gives_constant_tokens(rng):
    emb = InputEmbedding(rng, 1, 4)
    out = emb(DiffArray(np.full((1, 1, 8, 8, 8), 0.3))).data
    assert out.shape == (1, 4, 4, 4, 4)
    np.testing.assert_allclose(out, np.broadcast_to(out[0, 0, 0, 0], out.shape), atol=1e-6)


@pytest.mark.parametrize("p", [4, 8, 16])
def test_embedding_extent_is_half(rng, p):
    assert InputEmbedding(rng, 2, 3)(DiffArray(np.zeros((1, 2, p, p, p)))).shape == (1, p // 2, p // 2, p // 2, 3)


def test_embedding_identity_projection_enumerates_block_voxels(rng):
    emb = InputEmbedding(rng, 1, 1)
    emb.kernel.data[...] = 1.0
    x = np.arange(64, dtype=np.float32).reshape(1, 1, 4, 4, 4)
    for j in range(8):
        emb.proj.weight.data[...] = np.eye(8)[j]
        emb.proj.bias.data[...] = 0.0
        out = emb(DiffArray(x)).data[..., 0]
        dx, dy, dz = (j >> 2) & 1, (j >> 1) & 1, j & 1
        np.testing.assert_array_equal(out[0], x[0, 0, dx::2, dy::2, dz::2])


def test_embedding_rejects_odd():
    with pytest.raises(ValueError):
        InputEmbedding(np.random.default_rng(0), 1, 2)(DiffArray(np.zeros((1, 1, 5, 4, 4))))


# ---------------------------------------------------------------------------
# configuration


def test_config_defaults_valid():
    cfg = GeneratorConfig()
    cfg.validate()
    assert cfg.bottleneck_extent == 2
    assert cfg.bottleneck_width == 128


def test_paper_geometry_bottleneck():
    cfg = GeneratorConfig(patch_size=128, base_features=24, window_size=2, stage_depths=(2, 4, 2, 2))
    cfg.validate()
    assert cfg.bottleneck_extent == 4
    assert cfg.bottleneck_width == 768


@pytest.mark.parametrize(
    "kwargs,match",
    [
        ({"patch_size": 12}, "divisible"),
        ({"stage_depths": (2, 3, 2)}, "even"),
        ({"window_size": 3}, "window"),
        ({"heads_per_stage": (3, 2, 4)}, "heads"),
        ({"stage_depths": (2,)}, "two encoder stages"),
    ],
)
def test_config_rejections(kwargs, match):
    with pytest.raises(ValueError, match=match):
        GeneratorConfig(**kwargs).validate()


def test_unknown_arch_rejected():
    with pytest.raises(ValueError):
        build_generator(GeneratorConfig(arch="unet"))


# ---------------------------------------------------------------------------
# encode / decode


def test_encode_shapes_two_stages(rng):
    g = SwinSEER(GeneratorConfig(patch_size=16, base_features=8, window_size=2, stage_depths=(2, 2)))
    b, skips = g.encode(DiffArray(rng.standard_normal((2, 1, 16, 16, 16)).astype(np.float32)))
    assert b.shape == (2, 64, 2, 2, 2)
    assert skips.scales() == [2, 4]
    assert skips[2].shape == (2, 8, 8, 8, 8)
    assert skips[4].shape == (2, 16, 4, 4, 4)


def test_encode_constant_input_constant_bottleneck():
    g = SwinSEER(GeneratorConfig(patch_size=16, base_features=8, window_size=2, stage_depths=(2, 2)))
    b, _ = g.encode(DiffArray(np.full((1, 1, 16, 16, 16), -0.4, dtype=np.float32)))
    d = b.data[0]
    np.testing.assert_allclose(d, np.broadcast_to(d[:, :1, :1, :1], d.shape), atol=1e-5)


def test_decode_requires_all_skips(rng):
    g = SwinSEER(GeneratorConfig())
    b, skips = g.encode(DiffArray(np.zeros((1, 1, 16, 16, 16), dtype=np.float32)))
    del skips.maps[4]
    with pytest.raises(ValueError, match="p/4"):
        g.decode(b, skips)


def test_generator_output_shapes_default(rng):
    g = SwinSEER(GeneratorConfig())
    outs = g(DiffArray(rng.uniform(-1, 1, (2, 1, 16, 16, 16)).astype(np.float32)))
    assert [o.shape for o in outs] == [(2, 1, 4, 4, 4), (2, 1, 8, 8, 8), (2, 1, 16, 16, 16)]


def test_zeroed_decoder_gives_zero_outputs(rng):
    g = SwinSEER(GeneratorConfig())
    for name, p in g.named_parameters():
        if name.startswith(("dec.", "head.")):
            p.data[...] = 0.0
    outs = g(DiffArray(rng.uniform(-1, 1, (1, 1, 16, 16, 16)).astype(np.float32)))
    for o in outs:
        assert not np.any(o.data)


def test_finest_output_bounded_over_random_instantiations():
    cfg_rng = np.random.default_rng(99)
    for i in range(100):
        g = SwinSEER(GeneratorConfig(patch_size=8, base_features=4, window_size=2, stage_depths=(2, 2), seed=i))
        for p in g.parameters():
            p.data *= np.float32(cfg_rng.uniform(0.5, 4.0))
        x = cfg_rng.uniform(-1, 1, (1, 1, 8, 8, 8)).astype(np.float32)
        y = g(DiffArray(x))[2].data
        assert y.min() >= -1.0 and y.max() <= 1.0


def test_two_channel_input_for_cascade(rng):
    g = SwinSEER(GeneratorConfig(in_channels=2))
    outs = g(DiffArray(rng.uniform(-1, 1, (1, 2, 16, 16, 16)).astype(np.float32)))
    assert outs[2].shape == (1, 1, 16, 16, 16)
    with pytest.raises(ValueError, match="expected input"):
        g(DiffArray(np.zeros((1, 1, 16, 16, 16), dtype=np.float32)))


def test_generator_forward_is_deterministic(rng):
    g = build_generator(GeneratorConfig())
    x = DiffArray(rng.uniform(-1, 1, (2, 1, 16, 16, 16)).astype(np.float32))
    a = generator_forward(g, x)
    b = generator_forward(g, x)
    for u, v in zip(a, b):
        assert u.data.tobytes() == v.data.tobytes()


def test_same_seed_same_parameters():
    a = SwinSEER(GeneratorConfig(seed=5)).state_dict()
    b = SwinSEER(GeneratorConfig(seed=5)).state_dict()
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def _probe_errors(dtype, step):
    g = SwinSEER(GeneratorConfig(patch_size=8, base_features=4, window_size=2, stage_depths=(2, 2), seed=11))
    if dtype == np.float64:
        _to64(g)
    params = dict(g.named_parameters())
    probes = [
        ("embed.m1.kernel", (1, 0, 0, 0, 0)),
        ("stage1.pair0.wmsa.attn.bias_table", (0, 5)),
        ("stage2.pair0.swmsa.mlp.fc1.weight", (3, 2)),
        ("dec.u2.se.w1", (1, 3)),
        ("head.m4.kernel", (0, 2, 0, 0, 0)),
    ]
    x = DiffArray(np.random.default_rng(2).uniform(-1, 1, (1, 1, 8, 8, 8)).astype(dtype))

    def loss():
        y4, y2, y1 = g(x)
        return sum_(y4) + sum_(y2) + sum_(y1)

    g.zero_grad()
    backward(loss())
    errs = []
    for name, idx in probes:
        p = params[name]
        analytic = float(p.grad[idx])
        orig = p.data[idx]
        p.data[idx] = orig + step
        hi = float(loss().data)
        p.data[idx] = orig - step
        lo = float(loss().data)
        p.data[idx] = orig
        numeric = (hi - lo) / (2 * step)
        errs.append(abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric)))
    return errs


def test_generator_probe_gradients_64bit():
    assert max(_probe_errors(np.float64, 1e-5)) < 1e-6


def test_generator_probe_gradients_32bit():
    # analytic 32-bit gradients against a 64-bit twin of the same network
    g32 = SwinSEER(GeneratorConfig(patch_size=8, base_features=4, window_size=2, stage_depths=(2, 2), seed=11))
    g64 = _to64(SwinSEER(GeneratorConfig(patch_size=8, base_features=4, window_size=2, stage_depths=(2, 2), seed=11)))
    x = np.random.default_rng(2).uniform(-1, 1, (1, 1, 8, 8, 8))
    grads = []
    for g, dt in ((g32, np.float32), (g64, np.float64)):
        y4, y2, y1 = g(DiffArray(x.astype(dt)))
        backward(sum_(y4) + sum_(y2) + sum_(y1))
        grads.append({n: p.grad.astype(np.float64) for n, p in g.named_parameters()})
    names = ["embed.m1.kernel", "stage1.pair0.wmsa.attn.bias_table", "stage2.pair0.swmsa.mlp.fc1.weight",
             "dec.u2.se.w1", "head.m4.kernel"]
    for n in names:
        a, b = grads[0][n], grads[1][n]
        assert np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))) < 1e-3


# ---------------------------------------------------------------------------
# SE recalibration


def test_se_zero_weights_halves_features(rng):
    f = DiffArray(rng.standard_normal((2, 4, 3, 3, 3)))
    out = se_recalibrate(f, DiffArray(np.zeros((2, 4))), DiffArray(np.zeros((4, 2))))
    np.testing.assert_allclose(out.data, 0.5 * f.data)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_se_attention_strictly_inside_unit_interval(seed):
    r = np.random.default_rng(seed)
    f = r.standard_normal((2, 4, 2, 2, 2)) + 0.1
    out = se_recalibrate(DiffArray(f), DiffArray(r.standard_normal((2, 4))), DiffArray(r.standard_normal((4, 2)))).data
    ratio = out / f
    assert np.all(ratio > 0) and np.all(ratio < 1)
    assert np.all(np.abs(out) < np.abs(f))


def test_se_hand_sized_chain():
    f = np.ones((1, 2, 2, 2, 2))
    f[0, 1] = 2.0
    w1 = np.array([[0.5, -0.25]])
    w2 = np.array([[1.0], [-2.0]])
    z = np.array([1.0, 2.0])
    hidden = max(0.0, 0.5 * z[0] - 0.25 * z[1])
    a = 1 / (1 + np.exp(-np.array([1.0 * hidden, -2.0 * hidden])))
    out = se_recalibrate(DiffArray(f), DiffArray(w1), DiffArray(w2)).data
    np.testing.assert_allclose(out[0, 0], a[0] * 1.0, atol=1e-6)
    np.testing.assert_allclose(out[0, 1], a[1] * 2.0, atol=1e-6)
    assert abs(a[0] - 0.5) < 1e-12  # hidden unit is exactly at the relu kink


def test_se_hand_sized_chain_active_hidden():
    f = np.ones((1, 2, 1, 1, 1))
    f[0, 1] = 2.0
    w1 = np.array([[1.0, 0.5]])
    w2 = np.array([[0.3], [-0.7]])
    hidden = 1.0 + 0.5 * 2.0
    a = 1 / (1 + np.exp(-np.array([0.3, -0.7]) * hidden))
    out = se_recalibrate(DiffArray(f), DiffArray(w1), DiffArray(w2)).data
    np.testing.assert_allclose(out[0, :, 0, 0, 0], a * np.array([1.0, 2.0]), atol=1e-6)


def test_se_rejects_bad_weights():
    with pytest.raises(ValueError):
        se_recalibrate(DiffArray(np.ones((1, 4, 2, 2, 2))), DiffArray(np.ones((2, 3))), DiffArray(np.ones((4, 2))))


# ---------------------------------------------------------------------------
# debug generator


def test_identity_generator_returns_first_channel(rng):
    g = IdentityGenerator(GeneratorConfig(arch="identity", in_channels=2))
    x = rng.standard_normal((1, 2, 16, 16, 16)).astype(np.float32)
    y4, y2, y1 = g(DiffArray(x))
    np.testing.assert_array_equal(y1.data[:, 0], x[:, 0])
    assert y4.shape == (1, 1, 4, 4, 4) and y2.shape == (1, 1, 8, 8, 8)


def test_skipset_lookup():
    s = SkipSet({2: DiffArray(np.zeros(1))})
    assert 2 in s and 4 not in s and s.scales() == [2]
    assert moveaxis(DiffArray(np.zeros((1, 2, 3))), -1, 1).shape == (1, 3, 2)
