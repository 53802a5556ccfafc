########################
# Training Losses      #
########################

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, Mapping, Tuple, Union

import torch
from torch import nn
from torch.nn import functional as F

from app.exceptions import ConfigurationError, TrainingError
from app.feature_extractor import VGGFeatureExtractor, normalize_channels
from app.imaging import bicubic_resize
from app.validators import ImageValidator

Scalar = Union[torch.Tensor, float]

# Order of the generator objective's terms
TERM_NAMES = ("content", "qa", "gan", "perceptual")
MAX_SCORE = 5.0


@dataclass
class LossWeights:
    """
    Weights of the fused objectives.

    L_gen = content * L_content + qa * L_QA + gan * L_GAN^G + perceptual * L_perceptual
    L_disc = gan * L_GAN^D
    """

    content: float = 5.0
    qa: float = 2e-7
    gan: float = 1e-1
    perceptual: float = 5e-1

    def validate(self) -> None:
        for name in TERM_NAMES:
            value = getattr(self, name)
            if not value >= 0:
                raise ConfigurationError(f"loss.{name} must be non-negative, got {value}")

    def as_dict(self) -> Dict[str, float]:
        return {name: float(getattr(self, name)) for name in TERM_NAMES}


@dataclass
class TripletBatch:
    """
    Anchor (I_SR), positive (I_HR) and negative (bicubic-upsampled I_LR), all one shape.
    """

    anchor: torch.Tensor
    positive: torch.Tensor
    negative: torch.Tensor

    def __post_init__(self):
        ImageValidator.validate_same_shape(self.anchor, self.positive, ("anchor", "positive"))
        ImageValidator.validate_same_shape(self.anchor, self.negative, ("anchor", "negative"))

    @classmethod
    def from_images(cls, sr: torch.Tensor, hr: torch.Tensor, lr: torch.Tensor,
                    scale: int = 4) -> "TripletBatch":
        """Build a triplet whose negative is ``lr`` bicubic-upsampled by ``scale``."""
        return cls(anchor=sr, positive=hr, negative=bicubic_resize(lr, scale))

    def detached(self) -> "TripletBatch":
        return TripletBatch(self.anchor.detach(), self.positive, self.negative)


def content_loss(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all elements."""
    ImageValidator.validate_same_shape(sr, hr, ("I_SR", "I_HR"))
    return (sr - hr).abs().mean()


def perceptual_loss(extractor: VGGFeatureExtractor, sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    """
    Sum over the extractor's layers of the MSE between channel-normalised features.

    Raises:
        ValidationError: On a shape mismatch or an input too small for the deepest layer.
    """
    ImageValidator.validate_same_shape(sr, hr, ("I_SR", "I_HR"))
    sr_features = extractor(sr)
    with torch.no_grad():
        hr_features = extractor(hr)
    total = sr.new_zeros(())
    for name in extractor.layers:
        total = total + F.mse_loss(normalize_channels(sr_features[name]), normalize_channels(hr_features[name]))
    return total


def qa_loss(qa_model: nn.Module, sr: torch.Tensor, hr: torch.Tensor, max_score: float = MAX_SCORE) -> torch.Tensor:
    """Batch mean of (5 - Q(I_SR)), scoring I_SR against I_HR as its reference."""
    ImageValidator.validate_same_shape(sr, hr, ("I_SR", "I_HR"))
    return (max_score - qa_model(sr, hr)).mean()


def _per_item_mse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b) ** 2).flatten(1).mean(dim=1)


def triplet_distances(anchor: torch.Tensor, positive: torch.Tensor,
                      negative: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Per-item MSE from the anchor's patch map to the positive's and the negative's.

    Returns:
        Tuple[torch.Tensor, torch.Tensor]: ([N] positive distances, [N] negative distances).
    """
    ImageValidator.validate_same_shape(anchor, positive, ("D(anchor)", "D(positive)"))
    ImageValidator.validate_same_shape(anchor, negative, ("D(anchor)", "D(negative)"))
    return _per_item_mse(anchor, positive), _per_item_mse(anchor, negative)


def embed_triplet(discriminator: nn.Module, triplet: TripletBatch) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Run the discriminator on each member of the triplet separately."""
    return discriminator(triplet.anchor), discriminator(triplet.positive), discriminator(triplet.negative)


def gan_loss_generator(discriminator: nn.Module, triplet: TripletBatch) -> torch.Tensor:
    """Batch mean of MSE(D(SR), D(HR)) - MSE(D(SR), D(n(LR))) + 1. No hinge."""
    positive, negative = triplet_distances(*embed_triplet(discriminator, triplet))
    return (positive - negative).mean() + 1


def gan_loss_discriminator(discriminator: nn.Module, triplet: TripletBatch) -> torch.Tensor:
    """The generator loss with positive and negative swapped."""
    positive, negative = triplet_distances(*embed_triplet(discriminator, triplet))
    return (negative - positive).mean() + 1


def _check_finite(name: str, value: Scalar) -> None:
    if not torch.isfinite(torch.as_tensor(value)).all():
        raise TrainingError(f"Loss term '{name}' is not finite ({float(value)})", term=name)


def fused_generator_loss(weights: LossWeights, components: Mapping[str, Scalar]) -> torch.Tensor:
    """
    Weighted sum of the generator terms.

    Args:
        weights: The four term weights.
        components: Values keyed by ``TERM_NAMES``.

    Raises:
        TrainingError: If a component is missing or non-finite; ``term`` names it.
    """
    total = None
    for name in TERM_NAMES:
        if name not in components:
            raise TrainingError(f"Loss term '{name}' is missing", term=name)
        value = components[name]
        _check_finite(name, value)
        if not isinstance(value, torch.Tensor):
            value = torch.as_tensor(value, dtype=torch.float64)
        weighted = getattr(weights, name) * value
        total = weighted if total is None else total + weighted
    return total


def fused_discriminator_loss(weights: LossWeights, gan_d: Scalar) -> torch.Tensor:
    """
    Raises:
        TrainingError: If ``gan_d`` is not finite.
    """
    _check_finite("gan_d", gan_d)
    if not isinstance(gan_d, torch.Tensor):
        gan_d = torch.as_tensor(gan_d, dtype=torch.float64)
    return weights.gan * gan_d


########################
# Adversarial Losses   #
########################

class AdversarialLoss(ABC):
    """
    Adversarial objective used by the trainer for its gan terms.

    Both methods return the unweighted loss; the trainer applies the gan weight.
    """

    @abstractmethod
    def generator_loss(self, discriminator: nn.Module, triplet: TripletBatch) -> torch.Tensor:
        pass  # pragma: no cover

    @abstractmethod
    def discriminator_loss(self, discriminator: nn.Module, triplet: TripletBatch) -> torch.Tensor:
        pass  # pragma: no cover

    def __str__(self) -> str:
        return self.__class__.__name__


class TripletAdversarialLoss(AdversarialLoss):
    """Triplet objective over (SR, HR, bicubic LR) patch maps."""

    def generator_loss(self, discriminator: nn.Module, triplet: TripletBatch) -> torch.Tensor:
        return gan_loss_generator(discriminator, triplet)

    def discriminator_loss(self, discriminator: nn.Module, triplet: TripletBatch) -> torch.Tensor:
        return gan_loss_discriminator(discriminator, triplet)


class VanillaAdversarialLoss(AdversarialLoss):
    """
    Standard GAN objective with logits: D separates HR (1) from SR (0), G pushes SR to 1.

    The negative member of the triplet is unused.
    """

    def generator_loss(self, discriminator: nn.Module, triplet: TripletBatch) -> torch.Tensor:
        fake = discriminator(triplet.anchor)
        return F.binary_cross_entropy_with_logits(fake, torch.ones_like(fake))

    def discriminator_loss(self, discriminator: nn.Module, triplet: TripletBatch) -> torch.Tensor:
        real = discriminator(triplet.positive)
        fake = discriminator(triplet.anchor)
        return (F.binary_cross_entropy_with_logits(real, torch.ones_like(real))
                + F.binary_cross_entropy_with_logits(fake, torch.zeros_like(fake)))


class AdversarialLossFactory:
    """Creates adversarial objectives by name."""

    _losses: Dict[str, type] = {
        'triplet': TripletAdversarialLoss,
        'vanilla': VanillaAdversarialLoss,
    }

    @classmethod
    def list_losses(cls) -> list[str]:
        return list(cls._losses.keys())

    @classmethod
    def register_loss(cls, name: str, loss_class: type) -> None:
        """
        Register a new adversarial objective.

        Raises:
            TypeError: If ``loss_class`` does not inherit from AdversarialLoss.
        """
        if not issubclass(loss_class, AdversarialLoss):
            raise TypeError("Loss class must inherit from AdversarialLoss")
        cls._losses[name.lower()] = loss_class

    @classmethod
    def create_loss(cls, name: str) -> AdversarialLoss:
        """
        Raises:
            ConfigurationError: If the name is unknown.
        """
        loss_class = cls._losses.get(name.lower())
        if not loss_class:
            raise ConfigurationError(
                f"Unknown loss.adversarial '{name}'; choose from {', '.join(cls.list_losses())}"
            )
        return loss_class()
