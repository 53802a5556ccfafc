import pytest
import torch
from torch import nn

from app.discriminator import DiscriminatorConfig, PatchDiscriminator, discriminator_forward
from app.exceptions import ConfigurationError, ValidationError
from app.generator import count_parameters


@pytest.fixture(scope="module")
def discriminator():
    torch.manual_seed(0)
    return PatchDiscriminator().eval()


@pytest.fixture
def tiny_discriminator(tiny_discriminator_config):
    torch.manual_seed(0)
    return PatchDiscriminator(tiny_discriminator_config)

# Test cases for geometry

def test_default_parameter_count(discriminator):
    assert count_parameters(discriminator) == 2_766_529

def test_default_receptive_field():
    assert DiscriminatorConfig().receptive_field() == 70

@pytest.mark.parametrize("size, expected", [(256, 30), (70, 6), (128, 14)])
def test_default_output_size(size, expected):
    assert DiscriminatorConfig().output_size(size) == expected

def test_output_matches_declared_size(discriminator):
    with torch.no_grad():
        assert discriminator(torch.rand(1, 3, 70, 96)).shape == (1, 1, 6, 10)

def test_tiny_geometry(tiny_discriminator_config, tiny_discriminator):
    assert tiny_discriminator_config.receptive_field() == 16
    assert tiny_discriminator_config.output_size(32) == 14
    with torch.no_grad():
        assert discriminator_forward(tiny_discriminator, torch.rand(2, 3, 32, 32)).shape == (2, 1, 14, 14)

def test_rejects_input_below_receptive_field(tiny_discriminator):
    with pytest.raises(ValidationError, match="minimum size is 16x16"):
        tiny_discriminator(torch.rand(1, 3, 15, 40))

def test_rejects_wrong_channels(tiny_discriminator):
    with pytest.raises(ValidationError, match=r"\[N, 3, H, W\]"):
        tiny_discriminator(torch.rand(1, 1, 32, 32))

def test_layer_layout(discriminator):
    widths = [discriminator.layer0.conv.out_channels] + [
        getattr(discriminator, f"layer{i}").conv.out_channels for i in range(1, 5)
    ]
    assert widths == [64, 128, 256, 512, 1]
    assert not hasattr(discriminator.layer0, "bn")
    for i in (1, 2, 3):
        assert isinstance(getattr(discriminator, f"layer{i}").bn, nn.BatchNorm2d)
    assert not hasattr(discriminator.layer4, "bn")
    assert not hasattr(discriminator.layer4, "act")
    assert isinstance(discriminator.layer0.act, nn.LeakyReLU)
    assert discriminator.layer0.act.negative_slope == 0.2

def test_raw_scores_are_unbounded(discriminator):
    with torch.no_grad():
        out = discriminator(torch.rand(4, 3, 70, 70))
    assert float(out.min()) < 0.0 or float(out.max()) > 1.0

# Test cases for patch locality

def test_translation_covariance(discriminator):
    # Shifting the input by the total stride (8) shifts the interior cells by one
    torch.manual_seed(1)
    strip = torch.rand(1, 3, 70, 136)
    with torch.no_grad():
        left = discriminator(strip[..., :128])
        right = discriminator(strip[..., 8:])
    assert torch.allclose(right[..., 3:10], left[..., 4:11], atol=1e-5)

def test_single_pixel_changes_only_covering_cells(discriminator):
    torch.manual_seed(2)
    image = torch.rand(1, 3, 128, 128)
    changed = image.clone()
    changed[0, :, 64, 64] = 5.0
    with torch.no_grad():
        diff = (discriminator(changed) - discriminator(image)).abs()[0, 0]
    inside = torch.zeros_like(diff, dtype=torch.bool)
    inside[3:11, 3:11] = True
    assert float(diff[~inside].max()) <= 1e-5
    assert float(diff[inside].max()) > 1e-4

def test_eval_mode_has_no_batch_coupling(discriminator):
    torch.manual_seed(3)
    batch = torch.rand(3, 3, 70, 70)
    with torch.no_grad():
        together = discriminator_forward(discriminator, batch, mode="eval")
        alone = discriminator_forward(discriminator, batch[:1], mode="eval")
    assert torch.allclose(together[:1], alone, atol=1e-5)

# Test cases for modes and config

def test_forward_modes(tiny_discriminator):
    image = torch.rand(2, 3, 32, 32)
    discriminator_forward(tiny_discriminator, image, mode="train")
    assert tiny_discriminator.training
    assert int(tiny_discriminator.layer1.bn.num_batches_tracked) == 1
    discriminator_forward(tiny_discriminator, image, mode="eval")
    assert not tiny_discriminator.training
    assert int(tiny_discriminator.layer1.bn.num_batches_tracked) == 1

def test_unknown_mode(tiny_discriminator):
    with pytest.raises(ValidationError, match="mode must be one of"):
        discriminator_forward(tiny_discriminator, torch.rand(1, 3, 32, 32), mode="test")

@pytest.mark.parametrize("overrides, message", [
    ({"n_layers": 1, "strides": [2]}, "n_layers must be >= 2"),
    ({"strides": [2, 2, 1]}, "3 entries for 5 layers"),
    ({"base_channels": 0}, "must be positive"),
])
def test_invalid_config(overrides, message):
    with pytest.raises(ConfigurationError, match=message):
        PatchDiscriminator(DiscriminatorConfig(**overrides))
