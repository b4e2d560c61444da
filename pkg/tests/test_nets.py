import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from flowseg.errors import ConfigError, DomainError, ShapeError
from flowseg.nets import (
    LOGVAR_MIN,
    Codec,
    CodecConfig,
    ConvStackConfig,
    GaussianPosterior,
    VelocityNet,
    VelocityNetConfig,
    parameter_count,
    reparameterize,
    velocity_forward,
)

SMALL = ConvStackConfig(base_channels=8, channel_multipliers=(1, 2, 2), use_attention_at=(2,))


def codec(kind="mask", in_ch=1, stack=SMALL):
    torch.manual_seed(0)
    return Codec(CodecConfig(in_channels=in_ch, latent_channels=3, stack=stack, kind=kind)).eval()


def test_encode_decode_shapes():
    c = codec("image", 3)
    post = c.encode(torch.randn(2, 3, 32, 32))
    assert post.mean.shape == (2, 3, 8, 8) and post.logvar.shape == (2, 3, 8, 8)
    assert c.decode(post.mean).shape == (2, 3, 32, 32)


def test_full_resolution_latent_shape():
    c = codec("image", 3, ConvStackConfig(base_channels=4, channel_multipliers=(1, 2, 4), use_attention_at=()))
    assert c.latent_shape(256, 256) == (3, 64, 64)


def test_encode_is_deterministic():
    c = codec()
    x = torch.rand(2, 1, 32, 32)
    a, b = c.encode(x), c.encode(x)
    assert torch.equal(a.mean, b.mean) and torch.equal(a.logvar, b.logvar)


def test_indivisible_input():
    with pytest.raises(ShapeError):
        codec().encode(torch.rand(1, 1, 30, 32))


def test_decode_wrong_latent():
    with pytest.raises(ShapeError):
        codec().decode(torch.rand(1, 4, 8, 8))


def test_decoder_ranges():
    z = 10 * torch.randn(4, 3, 8, 8)
    with torch.no_grad():
        m = codec("mask", 1).decode(z)
        im = codec("image", 3).decode(z)
    assert m.min() >= 0 and m.max() <= 1
    assert im.min() >= -1 and im.max() <= 1


def test_logvar_clamped():
    post = GaussianPosterior(torch.zeros(3), torch.tensor([-100.0, 0.0, 100.0]))
    assert post.logvar.tolist() == [-30.0, 0.0, 20.0]


def test_reparameterize_limits():
    mean = torch.randn(2, 3, 4, 4)
    post = GaussianPosterior(mean, torch.full_like(mean, -1e9))
    assert post.logvar.min() == LOGVAR_MIN
    z = reparameterize(post, torch.randn(2, 3, 4, 4))
    assert torch.allclose(z, mean, atol=1e-6)
    n = torch.randn(2, 3, 4, 4)
    assert torch.equal(reparameterize(GaussianPosterior(torch.zeros_like(n), torch.zeros_like(n)), n), n)


def test_reparameterize_monte_carlo():
    g = torch.Generator().manual_seed(0)
    mean, logvar = torch.tensor([0.7]), torch.tensor([np.log(4.0)], dtype=torch.float32)
    noise = torch.randn(10_000, 1, generator=g)
    z = reparameterize(GaussianPosterior(mean.expand(10_000, 1), logvar.expand(10_000, 1)), noise)
    sigma = 2.0
    assert abs(float(z.mean()) - 0.7) < 3 * sigma / 100


def test_reparameterize_shape_mismatch():
    with pytest.raises(ShapeError):
        reparameterize(GaussianPosterior(torch.zeros(2, 3), torch.zeros(2, 3)), torch.zeros(3, 2))


def velocity(stack=SMALL, state=3, cond=3):
    torch.manual_seed(0)
    return VelocityNet(VelocityNetConfig(state, cond, stack, time_embedding_dim=16)).eval()


def test_velocity_shape_and_zero_init():
    net = velocity()
    z, c = torch.randn(2, 3, 8, 8), torch.randn(2, 3, 8, 8)
    out = velocity_forward(net, 0.3, z, c)
    assert out.shape == z.shape
    assert torch.count_nonzero(out) == 0


def test_velocity_deterministic():
    net = velocity()
    torch.nn.init.normal_(net.conv_out.weight)
    z, c = torch.randn(2, 3, 8, 8), torch.randn(2, 3, 8, 8)
    t = torch.tensor([0.1, 0.9])
    assert torch.equal(net(t, z, c), net(t, z, c))
    assert not torch.equal(net(0.1, z, c), net(0.9, z, c))


def test_velocity_domain_and_shape_errors():
    net = velocity()
    z = torch.randn(1, 3, 8, 8)
    with pytest.raises(DomainError):
        net(1.5, z, z)
    with pytest.raises(DomainError):
        net(-0.1, z, z)
    with pytest.raises(ShapeError):
        net(0.5, z, torch.randn(1, 3, 4, 4))
    with pytest.raises(ShapeError):
        net(0.5, torch.randn(1, 3, 6, 6), torch.randn(1, 3, 6, 6))


def test_config_invariants():
    with pytest.raises(ConfigError):
        ConvStackConfig(base_channels=2)
    with pytest.raises(ConfigError):
        ConvStackConfig(channel_multipliers=())
    with pytest.raises(ConfigError):
        VelocityNetConfig(time_embedding_dim=7)
    assert ConvStackConfig(channel_multipliers=(1, 2, 2, 4)).downsample_factor == 8


def test_parameter_count_is_config_function():
    a, b = codec(), codec()
    assert parameter_count(a) == parameter_count(b)
    bigger = codec(stack=ConvStackConfig(base_channels=16, channel_multipliers=(1, 2, 2)))
    assert parameter_count(bigger) > parameter_count(a)


stacks = st.builds(
    lambda base, mults, blocks, attn: ConvStackConfig(
        base_channels=base,
        channel_multipliers=tuple(mults),
        blocks_per_stage=blocks,
        use_attention_at=tuple(i for i in range(len(mults)) if attn & (1 << i)),
    ),
    base=st.sampled_from([4, 8, 12]),
    mults=st.lists(st.sampled_from([1, 2, 3]), min_size=1, max_size=3),
    blocks=st.integers(1, 2),
    attn=st.integers(0, 7),
)


@settings(max_examples=15, deadline=None)
@given(stack=stacks, state=st.integers(1, 3), cond=st.integers(1, 3), scale=st.integers(1, 2))
def test_velocity_shape_property(stack, state, cond, scale):
    side = stack.downsample_factor * scale * 2
    net = VelocityNet(VelocityNetConfig(state, cond, stack, time_embedding_dim=8))
    z = torch.randn(2, state, side, side)
    with torch.no_grad():
        assert net(torch.rand(2), z, torch.randn(2, cond, side, side)).shape == z.shape


@settings(max_examples=15, deadline=None)
@given(stack=stacks, in_ch=st.integers(1, 3), scale=st.integers(2, 3))
def test_codec_roundtrip_shape_property(stack, in_ch, scale):
    side = stack.downsample_factor * scale
    c = Codec(CodecConfig(in_channels=in_ch, latent_channels=2, stack=stack, kind="mask"))
    x = torch.rand(1, in_ch, side, side)
    with torch.no_grad():
        post = c.encode(x)
        assert post.mean.shape == (1, 2, scale, scale)
        assert c.decode(post.mean).shape == x.shape
