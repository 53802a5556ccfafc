import math

import pytest
import torch
from torch.nn import functional as F

from app.exceptions import ConfigurationError, ValidationError
from app.generator import (
    HLIE,
    LLIE,
    ChannelAttention,
    Generator,
    GeneratorConfig,
    ResidualBlock,
    RIRBlock,
    SRRec,
    UpsampleBlock,
    count_parameters,
)


@pytest.fixture
def tiny_generator(tiny_generator_config):
    torch.manual_seed(0)
    return Generator(tiny_generator_config)


def _zero_(conv):
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.zero_()

# Test cases for the architecture size

def test_default_parameter_count():
    count = count_parameters(Generator())
    assert count == 3_642_563
    assert 3_500_000 <= count <= 3_900_000

def test_tiny_parameter_count(tiny_generator):
    assert count_parameters(tiny_generator) == 4_645

def test_parameter_names(tiny_generator):
    names = set(dict(tiny_generator.named_parameters()))
    assert {"llie.weight", "hlie.rir0.res0.conv3.weight", "hlie.rir0.skip1x1.bias",
            "hlie.tail_conv.weight", "rec.up1.conv.weight", "rec.out_conv.bias"} <= names

# Test cases for the building blocks

def test_llie_shape(tiny_generator_config):
    llie = LLIE(tiny_generator_config)
    assert llie(torch.rand(2, 3, 10, 7)).shape == (2, 8, 10, 7)

def test_llie_zero_weights_give_zero(tiny_generator_config):
    llie = LLIE(tiny_generator_config)
    _zero_(llie)
    assert torch.count_nonzero(llie(torch.rand(1, 3, 6, 6))) == 0

def test_llie_is_a_padded_convolution(tiny_generator_config):
    llie = LLIE(tiny_generator_config)
    image = torch.rand(1, 3, 9, 9)
    expected = F.conv2d(image, llie.weight, llie.bias, padding=1)
    assert torch.allclose(llie(image), expected, atol=1e-6)

def test_hlie_zero_tail_is_identity(tiny_generator_config):
    hlie = HLIE(tiny_generator_config)
    _zero_(hlie.tail_conv)
    features = torch.randn(1, 8, 6, 6)
    assert torch.equal(hlie(features), features)

def test_rir_zero_skip_is_identity(tiny_generator_config):
    rir = RIRBlock(tiny_generator_config)
    _zero_(rir.skip1x1)
    features = torch.randn(2, 8, 5, 5)
    assert torch.equal(rir(features), features)

def test_resblock_zero_branch_is_identity(tiny_generator_config):
    block = ResidualBlock(tiny_generator_config)
    _zero_(block.conv3)
    features = torch.randn(1, 8, 5, 5)
    assert torch.equal(block(features), features)

def test_resblock_saturated_gate_passes_branch(tiny_generator_config):
    block = ResidualBlock(tiny_generator_config)
    with torch.no_grad():
        block.ca.expand.bias.fill_(1e4)
    features = torch.randn(1, 8, 5, 5)
    assert torch.allclose(block(features), features + block.branch(features), atol=1e-6)

def test_channel_attention_zero_input():
    ca = ChannelAttention(8, 4)
    assert torch.count_nonzero(ca(torch.zeros(1, 8, 4, 4))) == 0

def test_channel_attention_scales_whole_channels():
    ca = ChannelAttention(8, 4)
    features = torch.rand(2, 8, 5, 5) + 0.5
    ratio = ca(features) / features
    flat = ratio.flatten(2)
    assert torch.allclose(flat, flat[..., :1].expand_as(flat), atol=1e-6)
    assert bool(((flat > 0) & (flat < 1)).all())

def test_channel_attention_hand_set_weights():
    ca = ChannelAttention(2, 1)
    with torch.no_grad():
        ca.reduce.weight.copy_(torch.eye(2).view(2, 2, 1, 1))
        ca.reduce.bias.zero_()
        ca.expand.weight.copy_(torch.eye(2).view(2, 2, 1, 1))
        ca.expand.bias.zero_()
    features = torch.stack([torch.ones(3, 3), -torch.ones(3, 3)]).unsqueeze(0)
    out = ca(features)
    sigmoid_one = 1.0 / (1.0 + math.exp(-1.0))
    assert torch.allclose(out[0, 0], torch.full((3, 3), sigmoid_one), atol=1e-6)
    assert torch.allclose(out[0, 1], torch.full((3, 3), -0.5), atol=1e-6)

def test_channel_attention_rejects_wrong_width():
    with pytest.raises(ValidationError, match="Channel attention"):
        ChannelAttention(8, 4)(torch.zeros(1, 4, 3, 3))

def test_upsample_block_doubles_and_applies_leaky_relu(tiny_generator_config):
    block = UpsampleBlock(tiny_generator_config)
    with torch.no_grad():
        block.conv.weight.zero_()
        block.conv.bias.fill_(-1.0)
    out = block(torch.rand(1, 8, 3, 4))
    assert out.shape == (1, 8, 6, 8)
    assert torch.allclose(out, torch.full_like(out, -0.2))

def test_srrec_shape(tiny_generator_config):
    assert SRRec(tiny_generator_config)(torch.rand(1, 8, 5, 6)).shape == (1, 3, 20, 24)

# Test cases for the full generator

@pytest.mark.parametrize("size", [8, 16, 48, 100])
def test_scale_contract(tiny_generator, size):
    with torch.no_grad():
        out = tiny_generator(torch.rand(1, 3, size, size))
    assert out.shape == (1, 3, 4 * size, 4 * size)

def test_scale_contract_rectangular(tiny_generator):
    with torch.no_grad():
        assert tiny_generator(torch.rand(2, 3, 12, 7)).shape == (2, 3, 48, 28)

@pytest.mark.slow
def test_default_generator_scale_contract():
    with torch.no_grad():
        out = Generator()(torch.rand(2, 3, 48, 48))
    assert out.shape == (2, 3, 192, 192)
    assert torch.isfinite(out).all()

def test_forward_is_deterministic(tiny_generator):
    image = torch.rand(1, 3, 12, 12)
    with torch.no_grad():
        assert torch.equal(tiny_generator(image), tiny_generator(image))

def test_seeded_construction_is_reproducible(tiny_generator_config):
    torch.manual_seed(4)
    first = Generator(tiny_generator_config)
    torch.manual_seed(4)
    second = Generator(tiny_generator_config)
    for (name, a), (_, b) in zip(first.state_dict().items(), second.state_dict().items()):
        assert torch.equal(a, b), name

def test_residual_branches_start_small(tiny_generator):
    assert tiny_generator.hlie.tail_conv.weight.std() < tiny_generator.llie.weight.std()
    assert torch.count_nonzero(tiny_generator.hlie.tail_conv.bias) == 0

def test_weight_gradients_match_finite_differences(tiny_generator, gradient_check):
    generator = tiny_generator.double()
    torch.manual_seed(1)
    image = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    target = torch.rand(1, 3, 32, 32, dtype=torch.float64)

    def loss():
        return (generator(image) - target).pow(2).mean()

    assert gradient_check(loss, generator.llie.weight) < 1e-4
    assert gradient_check(loss, generator.rec.out_conv.weight) < 1e-4

def test_input_gradient_flows(tiny_generator):
    image = torch.rand(1, 3, 8, 8, requires_grad=True)
    tiny_generator(image).mean().backward()
    assert image.grad is not None
    assert torch.count_nonzero(image.grad) > 0

def test_rejects_wrong_channel_count(tiny_generator):
    with pytest.raises(ValidationError, match=r"LLIE expects a \[N, 3, H, W\]"):
        tiny_generator(torch.rand(1, 4, 8, 8))

def test_rejects_unbatched_input(tiny_generator):
    with pytest.raises(ValidationError):
        tiny_generator(torch.rand(3, 8, 8))

@pytest.mark.parametrize("overrides, message", [
    ({"scale": 3}, "generator.scale must be a power of two"),
    ({"base_channels": 30}, "must be divisible by"),
    ({"n_rir": 0}, "generator.n_rir must be >= 1"),
    ({"kernel": 2}, "generator.kernel must be odd"),
])
def test_invalid_config(overrides, message):
    with pytest.raises(ConfigurationError, match=message):
        Generator(GeneratorConfig(**overrides))

def test_upsample_stages():
    assert GeneratorConfig(scale=8).upsample_stages == 3
    assert GeneratorConfig().upsample_stages == 2
