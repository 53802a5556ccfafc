########################
# Generator Network    #
########################

from dataclasses import dataclass
import logging
import math

import torch
from torch import nn
from torch.nn import functional as F

from app.exceptions import ConfigurationError, ValidationError


@dataclass
class GeneratorConfig:
    """
    Architecture hyperparameters of the x4 generator.

    Attributes:
        base_channels: Feature width used throughout LLIE, HLIE and SRRec.
        n_rir: Number of residual-in-residual blocks in HLIE.
        resblocks_per_rir: Residual blocks inside each RIR block.
        convs_per_resblock: 3x3 convolutions inside each residual block.
        ca_reduction: Channel-attention bottleneck ratio.
        scale: Upscaling factor; a power of two realised as log2(scale) 2x stages.
        kernel: Spatial kernel of the 3x3 convolutions.
        residual_init_scale: Multiplier applied to the Kaiming init of residual-branch convs.
    """

    in_channels: int = 3
    base_channels: int = 32
    n_rir: int = 32
    resblocks_per_rir: int = 3
    convs_per_resblock: int = 4
    ca_reduction: int = 8
    scale: int = 4
    kernel: int = 3
    residual_init_scale: float = 0.1

    def validate(self) -> None:
        """
        Raises:
            ConfigurationError: If a field is out of range; the message names the field.
        """
        if self.scale < 2 or self.scale & (self.scale - 1):
            raise ConfigurationError(f"generator.scale must be a power of two >= 2, got {self.scale}")
        if self.base_channels % self.ca_reduction:
            raise ConfigurationError(
                f"generator.base_channels ({self.base_channels}) must be divisible by "
                f"generator.ca_reduction ({self.ca_reduction})"
            )
        for name in ("base_channels", "n_rir", "resblocks_per_rir", "convs_per_resblock", "kernel"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"generator.{name} must be >= 1")
        if self.kernel % 2 == 0:
            raise ConfigurationError(f"generator.kernel must be odd, got {self.kernel}")

    @property
    def upsample_stages(self) -> int:
        return int(math.log2(self.scale))


def _check_channels(x: torch.Tensor, expected: int, where: str) -> None:
    if x.dim() != 4 or x.shape[1] != expected:
        raise ValidationError(
            f"{where} expects a [N, {expected}, H, W] tensor, got {tuple(x.shape)}"
        )


def _conv(in_channels: int, out_channels: int, kernel: int) -> nn.Conv2d:
    return nn.Conv2d(in_channels, out_channels, kernel, padding=kernel // 2)


class ChannelAttention(nn.Module):
    """
    Per-channel gate: global average -> 1x1 reduce -> ReLU -> 1x1 expand -> sigmoid.

    out[:, c] = g_c * x[:, c] with g_c in (0, 1).
    """

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        self.channels = channels
        self.reduce = nn.Conv2d(channels, channels // reduction, 1)
        self.expand = nn.Conv2d(channels // reduction, channels, 1)

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(x, 1)
        return torch.sigmoid(self.expand(F.relu(self.reduce(pooled))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "Channel attention")
        return x * self.gates(x)


class ResidualBlock(nn.Module):
    """Four 3x3 convs with ReLU between them, channel attention, identity skip."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.channels = config.base_channels
        self.n_convs = config.convs_per_resblock
        for k in range(self.n_convs):
            self.add_module(f"conv{k}", _conv(self.channels, self.channels, config.kernel))
        self.ca = ChannelAttention(self.channels, config.ca_reduction)

    def branch(self, x: torch.Tensor) -> torch.Tensor:
        for k in range(self.n_convs):
            x = getattr(self, f"conv{k}")(x)
            if k < self.n_convs - 1:
                x = F.relu(x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "Residual block")
        return x + self.ca(self.branch(x))


class RIRBlock(nn.Module):
    """Residual-in-residual block: out = x + Conv1x1(ResBlock_n(...ResBlock_1(x)))."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.channels = config.base_channels
        self.n_blocks = config.resblocks_per_rir
        for j in range(self.n_blocks):
            self.add_module(f"res{j}", ResidualBlock(config))
        self.skip1x1 = nn.Conv2d(self.channels, self.channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_channels(x, self.channels, "RIR block")
        out = x
        for j in range(self.n_blocks):
            out = getattr(self, f"res{j}")(out)
        return x + self.skip1x1(out)


class LLIE(nn.Conv2d):
    """Low-level information extraction: one 3x3 conv from RGB to the feature width."""

    def __init__(self, config: GeneratorConfig):
        super().__init__(config.in_channels, config.base_channels, config.kernel,
                         padding=config.kernel // 2)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        _check_channels(image, self.in_channels, "LLIE")
        return super().forward(image)


class HLIE(nn.Module):
    """High-level information extraction: RIR chain, 3x3 tail conv, long skip."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.channels = config.base_channels
        self.n_rir = config.n_rir
        for i in range(self.n_rir):
            self.add_module(f"rir{i}", RIRBlock(config))
        self.tail_conv = _conv(self.channels, self.channels, config.kernel)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        _check_channels(features, self.channels, "HLIE")
        out = features
        for i in range(self.n_rir):
            out = getattr(self, f"rir{i}")(out)
        return features + self.tail_conv(out)


class UpsampleBlock(nn.Module):
    """Nearest-neighbour 2x upsampling followed by a 3x3 conv and LeakyReLU."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.conv = _conv(config.base_channels, config.base_channels, config.kernel)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.leaky_relu(self.conv(F.interpolate(x, scale_factor=2, mode="nearest")), 0.2)


class SRRec(nn.Module):
    """Reconstruction: log2(scale) upsampling blocks, then a 3x3 conv to RGB."""

    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.channels = config.base_channels
        self.n_stages = config.upsample_stages
        for s in range(self.n_stages):
            self.add_module(f"up{s}", UpsampleBlock(config))
        self.out_conv = _conv(self.channels, config.in_channels, config.kernel)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        _check_channels(features, self.channels, "SRRec")
        out = features
        for s in range(self.n_stages):
            out = getattr(self, f"up{s}")(out)
        return self.out_conv(out)


class Generator(nn.Module):
    """
    The x4 super-resolution generator: I_SR = SRRec(HLIE(LLIE(I_LR))).

    Parameters are named llie.*, hlie.rir{i}.res{j}.conv{k}.*, hlie.rir{i}.skip1x1.*,
    hlie.tail_conv.*, rec.up{s}.conv.* and rec.out_conv.*; checkpoints rely on these keys.
    The output is not clamped; inference clamps to [0, 1].
    """

    def __init__(self, config: GeneratorConfig = None):
        super().__init__()
        self.config = config or GeneratorConfig()
        self.config.validate()
        self.llie = LLIE(self.config)
        self.hlie = HLIE(self.config)
        self.rec = SRRec(self.config)
        self.reset_parameters()
        logging.info(f"Generator built with {count_parameters(self)} parameters")

    def reset_parameters(self) -> None:
        """
        Kaiming fan-in init for every conv, scaled down on residual branches; zero biases.
        """
        residual_convs = set()
        for module in self.hlie.modules():
            if isinstance(module, ResidualBlock):
                residual_convs.update(getattr(module, f"conv{k}") for k in range(module.n_convs))
            elif isinstance(module, RIRBlock):
                residual_convs.add(module.skip1x1)
        residual_convs.add(self.hlie.tail_conv)

        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
                if module in residual_convs:
                    with torch.no_grad():
                        module.weight.mul_(self.config.residual_init_scale)
                nn.init.zeros_(module.bias)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.rec(self.hlie(self.llie(image)))


def count_parameters(module: nn.Module) -> int:
    """Number of learnable scalars in ``module``."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
