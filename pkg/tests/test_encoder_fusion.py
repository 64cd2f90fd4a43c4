import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hgfuse import numerics as nx
from hgfuse.encoder import EncoderParams, FeaturePyramid, encode
from hgfuse.fusion import PafpnParams, downsample2x, fuse_add, pafpn
from hgfuse.numerics import ConfigError, ShapeError, SplitMix64, Tensor


def rand(*shape, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, size=shape)


def pyramid(c, h, seed=0):
    return FeaturePyramid(Tensor(rand(c, h, h, seed=seed)), Tensor(rand(c, h // 2, h // 2, seed=seed + 1)),
                          Tensor(rand(c, h // 4, h // 4, seed=seed + 2)))


def test_encoder_shapes():
    params = EncoderParams.init(SplitMix64(0), 2, 6, stride_base=2)
    out = encode(Tensor(rand(2, 16, 16)), params)
    assert out.shapes == ((6, 8, 8), (6, 4, 4), (6, 2, 2))


def test_encoder_is_deterministic_per_seed():
    a = EncoderParams.init(SplitMix64(5), 1, 4, 1)
    b = EncoderParams.init(SplitMix64(5), 1, 4, 1)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))


def test_encoder_rejects_bad_inputs():
    params = EncoderParams.init(SplitMix64(0), 1, 4, stride_base=2)
    with pytest.raises(ConfigError):
        encode(Tensor(rand(2, 16, 16)), params)
    with pytest.raises(ConfigError):
        encode(Tensor(rand(1, 12, 12)), params)


def test_encoder_level_matches_manual_patch_mlp():
    params = EncoderParams.init(SplitMix64(1), 1, 3, stride_base=1)
    img = rand(1, 8, 8, seed=2)
    out = encode(Tensor(img), params).f4.data  # 2x2 patches
    embed, mix = params.stages[1]
    for i in range(4):
        for j in range(4):
            patch = img[0, 2 * i:2 * i + 2, 2 * j:2 * j + 2].reshape(-1)
            hidden = np.maximum(patch @ embed.weight.data + embed.bias.data, 0.0)
            np.testing.assert_allclose(out[:, i, j], hidden @ mix.weight.data + mix.bias.data, atol=1e-12)


def test_encoder_gradient_first_layer():
    params = EncoderParams.init(SplitMix64(3), 1, 4, stride_base=1)
    img = Tensor(rand(1, 8, 8, seed=4))
    first = params.stages[2][0].weight
    rep = nx.finite_diff_check(lambda: nx.sum(encode(img, params).f5), [first], tolerance=1e-5)
    assert rep.passed, rep.worst


def test_fuse_add_matches_elementwise_loop():
    f, s = pyramid(2, 8, 0), pyramid(2, 8, 10)
    out = fuse_add(f, s)
    for a, b, o in zip(f.levels, s.levels, out.levels):
        expect = np.empty(a.shape)
        for idx in np.ndindex(a.shape):
            expect[idx] = a.data[idx] + b.data[idx]
        assert np.array_equal(o.data, expect)


def test_fuse_add_shape_mismatch():
    with pytest.raises(ShapeError):
        fuse_add(pyramid(2, 8), pyramid(3, 8))


def test_pafpn_preserves_shapes():
    p = pyramid(4, 8)
    out = pafpn(p, PafpnParams.init(SplitMix64(0), 4))
    assert out.shapes == p.shapes


def test_pafpn_identity_params_on_nonnegative_input_by_hand():
    # with identity projections and non-negative inputs ReLU is inert:
    # T5 = p5, T4 = p4 + up(T5), T3 = p3 + up(T4); P3 = T3, P4 = T4 + down(P3), P5 = T5 + down(P4)
    p = FeaturePyramid(*(Tensor(np.abs(t.data)) for t in pyramid(2, 8).levels))
    out = pafpn(p, PafpnParams.identity(2))

    def up(x):
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def down(x):
        c, h, w = x.shape
        return x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    t5 = p.f5.data
    t4 = p.f4.data + up(t5)
    t3 = p.f3.data + up(t4)
    o4 = t4 + down(t3)
    o5 = t5 + down(o4)
    for got, want in zip(out.levels, (t3, o4, o5)):
        np.testing.assert_allclose(got.data, want, atol=1e-12)


def test_pafpn_cross_scale_gradient():
    p = pyramid(2, 8)
    p5 = nx.parameter(p.f5.data)
    params = PafpnParams.init(SplitMix64(1), 2)

    def f():
        return nx.sum(pafpn(p.replace(f5=p5), params).f4)

    with nx.Tape() as tape:
        loss = f()
    assert np.any(nx.backward(loss, tape)[p5] != 0)
    assert nx.finite_diff_check(f, [p5], tolerance=1e-5).passed


def test_pafpn_rejects_wrong_ratio():
    p = FeaturePyramid(Tensor(rand(2, 8, 8)), Tensor(rand(2, 2, 2)), Tensor(rand(2, 1, 1)))
    with pytest.raises(ConfigError):
        pafpn(p, PafpnParams.identity(2))


def test_downsample_requires_even_square():
    with pytest.raises(ConfigError):
        downsample2x(Tensor(rand(1, 3, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.sampled_from([4, 8]), st.integers(0, 1000))
def test_pafpn_output_nonnegative_top_level(c, h, seed):
    # every output is a sum of ReLU outputs and their averages
    out = pafpn(pyramid(c, h, seed), PafpnParams.init(SplitMix64(seed), c))
    assert all(np.all(t.data >= 0) for t in out.levels)
