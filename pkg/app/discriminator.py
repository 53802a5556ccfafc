########################
# Patch Discriminator  #
########################

from dataclasses import dataclass, field
import logging
from typing import List

import torch
from torch import nn

from app.exceptions import ConfigurationError, ValidationError
from app.generator import count_parameters

MODES = ("train", "eval")


@dataclass
class DiscriminatorConfig:
    """
    PatchGAN hyperparameters.

    Channels double per layer starting from ``base_channels``; the last layer emits a
    single channel. Batch norm sits on every layer except the first and the last.
    """

    in_channels: int = 3
    n_layers: int = 5
    kernel: int = 4
    base_channels: int = 64
    strides: List[int] = field(default_factory=lambda: [2, 2, 2, 1, 1])
    padding: int = 1
    leaky_slope: float = 0.2

    def validate(self) -> None:
        if self.n_layers < 2:
            raise ConfigurationError(f"discriminator.n_layers must be >= 2, got {self.n_layers}")
        if len(self.strides) != self.n_layers:
            raise ConfigurationError(
                f"discriminator.strides has {len(self.strides)} entries for {self.n_layers} layers"
            )
        if self.base_channels < 1 or self.kernel < 1 or any(s < 1 for s in self.strides):
            raise ConfigurationError("discriminator.base_channels, kernel and strides must be positive")

    def channels(self) -> List[int]:
        """Output width of each layer: base, 2*base, ..., 1."""
        return [self.base_channels * 2 ** i for i in range(self.n_layers - 1)] + [1]

    def receptive_field(self) -> int:
        """Side of the input square seen by one output unit."""
        field_size = 1
        for stride in reversed(self.strides):
            field_size = (field_size - 1) * stride + self.kernel
        return field_size

    def output_size(self, size: int) -> int:
        """Output side for an input side, floor((s + 2p - k) / stride) + 1 per layer."""
        for stride in self.strides:
            size = (size + 2 * self.padding - self.kernel) // stride + 1
        return size


class PatchDiscriminator(nn.Module):
    """
    PatchGAN discriminator emitting raw (unbounded) realness scores.

    Each output cell scores one receptive-field patch (70x70 under the default config).
    Layers are named layer{i}.conv / layer{i}.bn.
    """

    def __init__(self, config: DiscriminatorConfig = None):
        super().__init__()
        self.config = config or DiscriminatorConfig()
        self.config.validate()
        widths = [self.config.in_channels] + self.config.channels()
        last = self.config.n_layers - 1
        for i, stride in enumerate(self.config.strides):
            layer = nn.Sequential()
            layer.add_module("conv", nn.Conv2d(widths[i], widths[i + 1], self.config.kernel,
                                               stride=stride, padding=self.config.padding))
            if 0 < i < last:
                layer.add_module("bn", nn.BatchNorm2d(widths[i + 1]))
            if i < last:
                layer.add_module("act", nn.LeakyReLU(self.config.leaky_slope))
            self.add_module(f"layer{i}", layer)
        logging.info(f"Discriminator built with {count_parameters(self)} parameters")

    @property
    def min_input_size(self) -> int:
        return self.config.receptive_field()

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() != 4 or image.shape[1] != self.config.in_channels:
            raise ValidationError(
                f"Discriminator expects [N, {self.config.in_channels}, H, W], got {tuple(image.shape)}"
            )
        height, width = image.shape[-2:]
        if min(height, width) < self.min_input_size:
            raise ValidationError(
                f"Discriminator input {height}x{width} is smaller than its receptive field; "
                f"minimum size is {self.min_input_size}x{self.min_input_size}"
            )
        out = image
        for i in range(self.config.n_layers):
            out = getattr(self, f"layer{i}")(out)
        return out


def discriminator_forward(model: PatchDiscriminator, image: torch.Tensor, mode: str = "eval") -> torch.Tensor:
    """
    Score ``image`` patch-wise in the requested batch-norm mode.

    'train' uses batch statistics and updates running statistics; 'eval' uses the
    running statistics, so no information leaks across spatial positions or batch items.

    Raises:
        ValidationError: For an unknown mode or an input smaller than the receptive field.
    """
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got '{mode}'")
    model.train(mode == "train")
    return model(image)
