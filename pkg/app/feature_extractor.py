#########################
# VGG Feature Extractor #
#########################

import logging
from pathlib import Path
import struct
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from app.exceptions import ConfigurationError, MetricError, ValidationError

# VGG-16 stage widths and convs per stage
VGG16_WIDTHS = (64, 128, 256, 512, 512)
VGG16_STAGE_CONVS = (2, 2, 3, 3, 3)

# Index of each ReLU inside torchvision's vgg16().features
LAYER_INDEX = {"relu1_2": 3, "relu2_2": 8, "relu3_3": 15, "relu4_3": 22, "relu5_3": 29}
LAYER_STAGE = {"relu1_2": 0, "relu2_2": 1, "relu3_3": 2, "relu4_3": 3, "relu5_3": 4}
VGG16_LAYERS = ("relu1_2", "relu2_2", "relu3_3", "relu4_3")
LPIPS_LAYERS = VGG16_LAYERS + ("relu5_3",)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
LPIPS_SHIFT = (-0.030, -0.088, -0.188)
LPIPS_SCALE = (0.458, 0.448, 0.450)

CALIBRATION_MAGIC = b"LPIPSCAL"
CALIBRATION_VERSION = 1


def normalize_channels(features: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    """Unit-normalise the channel vector at every spatial location."""
    return F.normalize(features, p=2, dim=1, eps=eps)


def _vgg_features(widths: Sequence[int], last_index: int) -> nn.Sequential:
    layers: List[nn.Module] = []
    in_channels = 3
    for stage, (width, n_convs) in enumerate(zip(widths, VGG16_STAGE_CONVS)):
        if stage:
            layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
        for _ in range(n_convs):
            layers.append(nn.Conv2d(in_channels, width, kernel_size=3, padding=1))
            layers.append(nn.ReLU(inplace=False))
            in_channels = width
    return nn.Sequential(*layers[:last_index + 1])


class VGGFeatureExtractor(nn.Module):
    """
    Frozen VGG-16 feature function exposing named ReLU activations.

    Args:
        layers: Names from ``LAYER_INDEX`` to return, in order.
        weights: 'imagenet' (torchvision pretrained), 'random', or a path to a state dict.
        widths: Stage widths; anything but the VGG-16 default requires 'random' or a
            matching state dict (used for tiny test extractors).
        input_norm: 'imagenet' maps [0, 1] inputs with the ImageNet mean/std;
            'lpips' maps them to [-1, 1] and applies the LPIPS scaling layer.

    The extractor never leaves eval mode and its parameters never require gradients.
    """

    def __init__(self, layers: Sequence[str] = VGG16_LAYERS, weights: Union[str, Path] = "imagenet",
                 widths: Sequence[int] = VGG16_WIDTHS, input_norm: str = "imagenet"):
        super().__init__()
        unknown = [name for name in layers if name not in LAYER_INDEX]
        if unknown or not layers:
            raise ConfigurationError(f"Unknown VGG layers: {unknown or 'none requested'}")
        if len(widths) != len(VGG16_WIDTHS):
            raise ConfigurationError(f"VGG widths need {len(VGG16_WIDTHS)} entries, got {list(widths)}")
        if input_norm not in ("imagenet", "lpips"):
            raise ConfigurationError(f"input_norm must be 'imagenet' or 'lpips', got '{input_norm}'")

        self.layers = tuple(layers)
        self.widths = tuple(widths)
        self.input_norm = input_norm
        self.features = _vgg_features(self.widths, max(LAYER_INDEX[n] for n in self.layers))

        if input_norm == "imagenet":
            shift, scale = torch.tensor(IMAGENET_MEAN), torch.tensor(IMAGENET_STD)
        else:
            shift, scale = torch.tensor(LPIPS_SHIFT), torch.tensor(LPIPS_SCALE)
        self.register_buffer("shift", shift.view(1, 3, 1, 1))
        self.register_buffer("scale", scale.view(1, 3, 1, 1))

        self._load_weights(weights)
        for parameter in self.parameters():
            parameter.requires_grad_(False)
        super().train(False)

    def _load_weights(self, weights: Union[str, Path]) -> None:
        if str(weights) == "random":
            return
        if str(weights) == "imagenet":
            if self.widths != VGG16_WIDTHS:
                raise ConfigurationError("Pretrained VGG-16 weights need the default widths")
            from torchvision.models import VGG16_Weights, vgg16
            state = vgg16(weights=VGG16_Weights.IMAGENET1K_V1).features.state_dict()
        else:
            path = Path(weights)
            if not path.is_file():
                raise ConfigurationError(f"VGG weights file not found: {path}")
            state = torch.load(path, map_location="cpu", weights_only=True)
            state = {k.removeprefix("features."): v for k, v in state.items()}
        own = self.features.state_dict()
        try:
            self.features.load_state_dict({k: state[k] for k in own})
        except (KeyError, RuntimeError) as e:
            raise ConfigurationError(f"VGG weights do not match the extractor: {e}") from e
        logging.info(f"Loaded VGG-16 weights from {weights}")

    def train(self, mode: bool = True) -> "VGGFeatureExtractor":
        return super().train(False)

    @property
    def min_input_size(self) -> int:
        """Smallest input side that still leaves one pixel at the deepest requested layer."""
        return 2 ** max(LAYER_STAGE[n] for n in self.layers)

    def channels(self, name: str) -> int:
        return self.widths[LAYER_STAGE[name]]

    def forward(self, image: torch.Tensor) -> Dict[str, torch.Tensor]:
        if min(image.shape[-2:]) < self.min_input_size:
            raise ValidationError(
                f"Input {tuple(image.shape[-2:])} is too small for layer {self.layers[-1]}; "
                f"minimum side is {self.min_input_size}"
            )
        if self.input_norm == "lpips":
            image = image * 2 - 1
        x = (image - self.shift) / self.scale
        wanted = {LAYER_INDEX[n]: n for n in self.layers}
        outputs = {}
        for index, module in enumerate(self.features):
            x = module(x)
            if index in wanted:
                outputs[wanted[index]] = x
        return outputs


def save_lpips_calibration(weights: Sequence[torch.Tensor], path: Union[str, Path]) -> Path:
    """
    Write per-layer LPIPS channel weights in the binary calibration format.

    See docs/LPIPS_CALIBRATION.md for the byte layout.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    chunks = [CALIBRATION_MAGIC, struct.pack("<II", CALIBRATION_VERSION, len(weights))]
    for layer in weights:
        values = np.asarray(torch.as_tensor(layer).detach().cpu().reshape(-1), dtype="<f4")
        chunks.append(struct.pack("<I", values.size))
        chunks.append(values.tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def _parse_binary_calibration(data: bytes, path: Path) -> List[torch.Tensor]:
    header = len(CALIBRATION_MAGIC) + 8
    if len(data) < header:
        raise MetricError(f"LPIPS calibration file {path} is truncated")
    version, n_layers = struct.unpack_from("<II", data, len(CALIBRATION_MAGIC))
    if version != CALIBRATION_VERSION:
        raise MetricError(f"LPIPS calibration version {version} is not supported (expected {CALIBRATION_VERSION})")
    offset, layers = header, []
    for _ in range(n_layers):
        if offset + 4 > len(data):
            raise MetricError(f"LPIPS calibration file {path} is truncated")
        (channels,) = struct.unpack_from("<I", data, offset)
        offset += 4
        end = offset + 4 * channels
        if end > len(data):
            raise MetricError(f"LPIPS calibration file {path} is truncated")
        layers.append(torch.from_numpy(np.frombuffer(data[offset:end], dtype="<f4").astype(np.float32)))
        offset = end
    if offset != len(data):
        raise MetricError(f"LPIPS calibration file {path} has {len(data) - offset} trailing bytes")
    return layers


def load_lpips_calibration(path: Union[str, Path, None],
                           expected_channels: Sequence[int] = VGG16_WIDTHS) -> List[torch.Tensor]:
    """
    Load LPIPS linear-layer weights, one non-negative vector per layer.

    Accepts the binary format documented in docs/LPIPS_CALIBRATION.md or a torch
    state dict with ``lin{i}.model.1.weight`` tensors.

    Raises:
        MetricError: If the file is missing or malformed, explaining how to supply one.
    """
    if path is None or not Path(path).is_file():
        raise MetricError(
            f"LPIPS calibration weights not found ({path}). Pass --lpips-calibration PATH or set "
            "TRIPLETSR_LPIPS_CALIBRATION to a calibration file (format: docs/LPIPS_CALIBRATION.md, "
            "or the lin{i}.model.1.weight state dict distributed with the reference LPIPS release)."
        )
    path = Path(path)
    data = path.read_bytes()
    if data.startswith(CALIBRATION_MAGIC):
        layers = _parse_binary_calibration(data, path)
    else:
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
            layers = [state[f"lin{i}.model.1.weight"].reshape(-1).float() for i in range(len(expected_channels))]
        except Exception as e:
            raise MetricError(f"Could not read LPIPS calibration {path}: {e}") from e

    if [layer.numel() for layer in layers] != list(expected_channels):
        raise MetricError(
            f"LPIPS calibration {path} has layer sizes {[layer.numel() for layer in layers]}, "
            f"expected {list(expected_channels)}"
        )
    if any((layer < 0).any() for layer in layers):
        raise MetricError(f"LPIPS calibration {path} contains negative weights")
    logging.info(f"Loaded LPIPS calibration from {path}")
    return layers
