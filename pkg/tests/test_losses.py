import math
from unittest.mock import Mock, patch

import pytest
import torch
from torch import nn
from torch.nn import functional as F

from app.discriminator import PatchDiscriminator
from app.exceptions import ConfigurationError, TrainingError, ValidationError
from app.feature_extractor import normalize_channels
from app.losses import (
    AdversarialLoss,
    AdversarialLossFactory,
    LossWeights,
    TripletAdversarialLoss,
    TripletBatch,
    VanillaAdversarialLoss,
    content_loss,
    fused_discriminator_loss,
    fused_generator_loss,
    gan_loss_discriminator,
    gan_loss_generator,
    perceptual_loss,
    qa_loss,
    triplet_distances,
)
from app.qa_network import QANetwork


@pytest.fixture
def tiny_d64(tiny_discriminator_config):
    torch.manual_seed(0)
    return PatchDiscriminator(tiny_discriminator_config).double().eval()


def _random_triplet(generator, size=16, dtype=torch.float64):
    return TripletBatch(*(torch.rand(2, 3, size, size, generator=generator, dtype=dtype) for _ in range(3)))

# Test cases for LossWeights

def test_default_weights():
    weights = LossWeights()
    assert weights.as_dict() == {"content": 5.0, "qa": 2e-7, "gan": 0.1, "perceptual": 0.5}
    weights.validate()

def test_negative_weight_rejected():
    with pytest.raises(ConfigurationError, match="loss.gan must be non-negative"):
        LossWeights(gan=-0.1).validate()

# Test cases for the pixel and feature losses

def test_content_loss_values():
    image = torch.rand(1, 3, 8, 8)
    assert float(content_loss(image, image)) == 0.0
    assert float(content_loss(torch.zeros(1, 3, 4, 4), torch.full((1, 3, 4, 4), 0.5))) == 0.5

def test_content_loss_is_symmetric():
    a, b = torch.rand(2, 3, 6, 6), torch.rand(2, 3, 6, 6)
    assert torch.equal(content_loss(a, b), content_loss(b, a))

def test_content_loss_shape_mismatch():
    with pytest.raises(ValidationError, match="Shape mismatch: I_SR"):
        content_loss(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 9))

def test_perceptual_loss_identity_is_zero(tiny_extractor):
    image = torch.rand(1, 3, 16, 16)
    assert float(perceptual_loss(tiny_extractor, image, image)) == pytest.approx(0.0, abs=1e-12)

def test_perceptual_loss_is_non_negative(tiny_extractor):
    assert float(perceptual_loss(tiny_extractor, torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16))) >= 0.0

def test_perceptual_loss_sums_layers(tiny_extractor):
    sr, hr = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
    sr_features, hr_features = tiny_extractor(sr), tiny_extractor(hr)
    expected = sum(
        F.mse_loss(normalize_channels(sr_features[name]), normalize_channels(hr_features[name]))
        for name in tiny_extractor.layers
    )
    assert torch.allclose(perceptual_loss(tiny_extractor, sr, hr), expected)

def test_perceptual_loss_too_small(tiny_extractor):
    with pytest.raises(ValidationError, match="too small"):
        perceptual_loss(tiny_extractor, torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4))

def test_qa_loss_with_mocked_scores():
    scorer = Mock(return_value=torch.tensor([3.0, 4.0]))
    sr, hr = torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8)
    assert float(qa_loss(scorer, sr, hr)) == 1.5
    scorer.assert_called_once_with(sr, hr)

def test_qa_loss_perfect_score():
    scorer = Mock(return_value=torch.full((3,), 5.0))
    assert float(qa_loss(scorer, torch.rand(3, 3, 8, 8), torch.rand(3, 3, 8, 8))) == 0.0

def test_qa_loss_with_real_network(tiny_qa_config):
    model = QANetwork(tiny_qa_config).freeze()
    value = float(qa_loss(model, torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)))
    assert 0.0 <= value <= 4.0

# Test cases for the triplet adversarial losses

def test_triplet_batch_shape_check():
    with pytest.raises(ValidationError, match="anchor"):
        TripletBatch(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8), torch.rand(1, 3, 4, 4))

def test_triplet_from_images_upsamples_lr():
    lr = torch.rand(2, 3, 4, 4)
    triplet = TripletBatch.from_images(torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16), lr)
    assert triplet.negative.shape == (2, 3, 16, 16)

def test_triplet_detached():
    anchor = torch.rand(1, 3, 8, 8, requires_grad=True)
    triplet = TripletBatch(anchor * 2, torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)).detached()
    assert not triplet.anchor.requires_grad

def test_triplet_distances_per_item():
    anchor = torch.zeros(2, 1, 2, 2)
    positive = torch.ones(2, 1, 2, 2)
    negative = torch.cat([torch.full((1, 1, 2, 2), 2.0), torch.full((1, 1, 2, 2), 3.0)])
    positive_distance, negative_distance = triplet_distances(anchor, positive, negative)
    assert positive_distance.tolist() == [1.0, 1.0]
    assert negative_distance.tolist() == [4.0, 9.0]

def test_gan_losses_hand_computed():
    triplet = TripletBatch(torch.zeros(1, 3, 4, 4), torch.ones(1, 3, 4, 4), torch.full((1, 3, 4, 4), 2.0))
    assert float(gan_loss_generator(nn.Identity(), triplet)) == -2.0
    assert float(gan_loss_discriminator(nn.Identity(), triplet)) == 4.0

def test_gan_losses_sum_to_two(tiny_d64):
    generator = torch.Generator().manual_seed(0)
    with torch.no_grad():
        for _ in range(100):
            triplet = _random_triplet(generator)
            total = gan_loss_generator(tiny_d64, triplet) + gan_loss_discriminator(tiny_d64, triplet)
            assert abs(float(total) - 2.0) < 1e-12

def test_gan_generator_loss_is_one_when_positive_equals_negative(tiny_d64):
    generator = torch.Generator().manual_seed(1)
    anchor, other = (torch.rand(1, 3, 16, 16, generator=generator, dtype=torch.float64) for _ in range(2))
    triplet = TripletBatch(anchor, other, other.clone())
    assert float(gan_loss_generator(tiny_d64, triplet)) == pytest.approx(1.0, abs=1e-12)

def test_gan_loss_is_not_hinged():
    # A negative far from the anchor drives the loss below zero
    triplet = TripletBatch(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 4), torch.full((1, 3, 4, 4), 5.0))
    assert float(gan_loss_generator(nn.Identity(), triplet)) == -24.0

# Test cases for gradients

def test_content_gradient(gradient_check):
    generator = torch.Generator().manual_seed(2)
    sr = torch.rand(1, 3, 16, 16, generator=generator, dtype=torch.float64)
    hr = torch.rand(1, 3, 16, 16, generator=generator, dtype=torch.float64)
    assert gradient_check(lambda: content_loss(sr, hr), sr) < 1e-6

def test_perceptual_gradient(tiny_extractor, gradient_check):
    extractor = tiny_extractor.double()
    generator = torch.Generator().manual_seed(3)
    sr = torch.rand(1, 3, 16, 16, generator=generator, dtype=torch.float64)
    hr = torch.rand(1, 3, 16, 16, generator=generator, dtype=torch.float64)
    assert gradient_check(lambda: perceptual_loss(extractor, sr, hr), sr) < 1e-4

def test_qa_gradient(tiny_qa_config, gradient_check):
    torch.manual_seed(0)
    model = QANetwork(tiny_qa_config).double().freeze()
    generator = torch.Generator().manual_seed(4)
    sr = torch.rand(1, 3, 16, 16, generator=generator, dtype=torch.float64)
    hr = torch.rand(1, 3, 16, 16, generator=generator, dtype=torch.float64)
    assert gradient_check(lambda: qa_loss(model, sr, hr), sr) < 1e-4

def test_gan_generator_gradient(tiny_d64, gradient_check):
    triplet = _random_triplet(torch.Generator().manual_seed(5))
    assert gradient_check(lambda: gan_loss_generator(tiny_d64, triplet), triplet.anchor) < 1e-4

def test_gan_discriminator_gradient(tiny_d64, gradient_check):
    triplet = _random_triplet(torch.Generator().manual_seed(6))
    weight = tiny_d64.layer0.conv.weight
    assert gradient_check(lambda: gan_loss_discriminator(tiny_d64, triplet), weight) < 1e-4

def test_gan_discriminator_gradient_with_respect_to_sr(tiny_d64, gradient_check):
    triplet = _random_triplet(torch.Generator().manual_seed(7))
    assert gradient_check(lambda: gan_loss_discriminator(tiny_d64, triplet), triplet.anchor) < 1e-4

# Test cases for the fused objectives

def test_fused_generator_loss_weighting():
    components = {"content": 1.0, "qa": 2.0, "gan": 3.0, "perceptual": 4.0}
    total = fused_generator_loss(LossWeights(), components)
    assert float(total) == pytest.approx(5.0 + 4e-7 + 0.3 + 2.0)

def test_fused_generator_loss_keeps_the_graph():
    content = torch.tensor(0.5, requires_grad=True)
    total = fused_generator_loss(LossWeights(), {"content": content, "qa": 0.0, "gan": 0.0, "perceptual": 0.0})
    total.backward()
    assert float(content.grad) == 5.0

def test_fused_generator_loss_zero_cases():
    zeros = {name: 0.0 for name in ("content", "qa", "gan", "perceptual")}
    assert float(fused_generator_loss(LossWeights(), zeros)) == 0.0
    ones = {name: 1.0 for name in zeros}
    assert float(fused_generator_loss(LossWeights(0.0, 0.0, 0.0, 0.0), ones)) == 0.0

@pytest.mark.parametrize("bad_value", [float("nan"), float("inf"), -math.inf])
def test_fused_generator_loss_non_finite(bad_value):
    components = {"content": 1.0, "qa": bad_value, "gan": 1.0, "perceptual": 1.0}
    with pytest.raises(TrainingError, match="'qa' is not finite") as exc_info:
        fused_generator_loss(LossWeights(), components)
    assert exc_info.value.term == "qa"

def test_fused_generator_loss_missing_term():
    with pytest.raises(TrainingError, match="'perceptual' is missing") as exc_info:
        fused_generator_loss(LossWeights(), {"content": 1.0, "qa": 1.0, "gan": 1.0})
    assert exc_info.value.term == "perceptual"

def test_fused_discriminator_loss():
    assert float(fused_discriminator_loss(LossWeights(), 2.0)) == pytest.approx(0.2)
    with pytest.raises(TrainingError) as exc_info:
        fused_discriminator_loss(LossWeights(), torch.tensor(float("nan")))
    assert exc_info.value.term == "gan_d"

# Test cases for AdversarialLossFactory

def test_factory_lists_losses():
    assert AdversarialLossFactory.list_losses() == ["triplet", "vanilla"]

def test_factory_creates_by_name():
    assert isinstance(AdversarialLossFactory.create_loss("TRIPLET"), TripletAdversarialLoss)
    assert str(AdversarialLossFactory.create_loss("vanilla")) == "VanillaAdversarialLoss"

def test_factory_unknown_name():
    with pytest.raises(ConfigurationError, match="Unknown loss.adversarial 'hinge'"):
        AdversarialLossFactory.create_loss("hinge")

def test_factory_register_rejects_non_loss():
    with pytest.raises(TypeError, match="must inherit from AdversarialLoss"):
        AdversarialLossFactory.register_loss("bad", object)

@patch.dict(AdversarialLossFactory._losses)
def test_factory_register_new_loss():
    class ZeroLoss(AdversarialLoss):
        def generator_loss(self, discriminator, triplet):
            return torch.zeros(())

        def discriminator_loss(self, discriminator, triplet):
            return torch.zeros(())

    AdversarialLossFactory.register_loss("Zero", ZeroLoss)
    assert isinstance(AdversarialLossFactory.create_loss("zero"), ZeroLoss)

def test_vanilla_losses_at_zero_logits():
    triplet = TripletBatch(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 2, 2))
    loss = VanillaAdversarialLoss()
    assert float(loss.generator_loss(nn.Identity(), triplet)) == pytest.approx(math.log(2))
    assert float(loss.discriminator_loss(nn.Identity(), triplet)) == pytest.approx(2 * math.log(2))

def test_triplet_loss_delegates(tiny_d64):
    triplet = _random_triplet(torch.Generator().manual_seed(7))
    loss = TripletAdversarialLoss()
    with torch.no_grad():
        assert torch.equal(loss.generator_loss(tiny_d64, triplet), gan_loss_generator(tiny_d64, triplet))
        assert torch.equal(loss.discriminator_loss(tiny_d64, triplet), gan_loss_discriminator(tiny_d64, triplet))
