########################
# Imaging Core         #
########################

from dataclasses import dataclass, field
from fractions import Fraction
import logging
import math
from pathlib import Path
from typing import Optional, Tuple, Union

import cv2
import numpy as np
import torch

from app.exceptions import ImageIOError, ValidationError
from app.validators import ImageValidator

Factor = Union[int, float, Fraction]

# Keys' cubic convolution parameter
BICUBIC_A = -0.5

ROTATIONS = (0, 90)
CROP_POLICIES = ("random", "center")


@dataclass
class ImagePair:
    """
    Aligned LR/HR image pair, the unit of supervised training.

    The HR spatial dims must be exactly ``scale`` times the LR spatial dims.
    """

    lr: torch.Tensor
    hr: torch.Tensor
    scale: int = 4
    identifier: str = ""

    def __post_init__(self):
        ImageValidator.validate_tensor(self.lr, name=f"LR image '{self.identifier}'")
        ImageValidator.validate_tensor(self.hr, name=f"HR image '{self.identifier}'")
        ImageValidator.validate_pair(self.lr, self.hr, self.scale)


@dataclass
class AugmentationSpec:
    """
    Geometric augmentation applied identically to both members of a pair.

    Attributes:
        hflip: Mirror left-right.
        rotation: 0 or 90 degrees (counter-clockwise).
        crop_size: LR crop side in pixels, or None to keep the full image.
        crop_policy: 'random' draws offsets from the rng, 'center' takes the middle.
    """

    hflip: bool = False
    rotation: int = 0
    crop_size: Optional[int] = None
    crop_policy: str = "center"

    def __post_init__(self):
        if self.rotation not in ROTATIONS:
            raise ValidationError(f"rotation must be one of {ROTATIONS}, got {self.rotation}")
        if self.crop_policy not in CROP_POLICIES:
            raise ValidationError(
                f"crop_policy must be one of {CROP_POLICIES}, got '{self.crop_policy}'"
            )
        if self.crop_size is not None and self.crop_size <= 0:
            raise ValidationError(f"crop_size must be positive, got {self.crop_size}")

    @classmethod
    def sample(cls, generator: torch.Generator, crop_size: Optional[int]) -> "AugmentationSpec":
        """
        Draw a training augmentation: random flip, random 0/90 rotation, random crop.

        Args:
            generator: Seeded torch generator; consumed deterministically.
            crop_size: LR crop side, or None for the full image.

        Returns:
            AugmentationSpec: The sampled spec.
        """
        draws = torch.randint(0, 2, (2,), generator=generator)
        return cls(
            hflip=bool(draws[0]),
            rotation=ROTATIONS[int(draws[1])],
            crop_size=crop_size,
            crop_policy="random",
        )


def load_image(path: Union[str, Path]) -> torch.Tensor:
    """
    Load an 8- or 16-bit RGB image as a [1, 3, H, W] float32 tensor in [0, 1].

    Args:
        path: PNG or JPEG file.

    Returns:
        torch.Tensor: The image, 255 (or 65535) mapped to exactly 1.0.

    Raises:
        ImageIOError: If the file is missing, cannot be decoded, has an unsupported
            bit depth or is not 3-channel.
    """
    path = Path(path)
    if not path.is_file():
        raise ImageIOError(f"Image not found: {path}")
    array = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if array is None:
        raise ImageIOError(f"Could not decode image: {path}")
    if array.ndim != 3 or array.shape[2] != 3:
        channels = 1 if array.ndim == 2 else array.shape[2]
        raise ImageIOError(f"Expected a 3-channel RGB image, got {channels} channel(s): {path}")
    if array.dtype == np.uint8:
        max_value = 255.0
    elif array.dtype == np.uint16:
        max_value = 65535.0
    else:
        raise ImageIOError(f"Unsupported bit depth {array.dtype} in {path}")
    rgb = cv2.cvtColor(array, cv2.COLOR_BGR2RGB).astype(np.float32) / max_value
    return from_numpy_image(rgb)


def save_image(image: torch.Tensor, path: Union[str, Path], bits: int = 8) -> Path:
    """
    Write a [1, 3, H, W] or [3, H, W] tensor in [0, 1] as an 8- or 16-bit PNG.

    Values are clamped and rounded to the nearest code.

    Raises:
        ImageIOError: If the file cannot be written.
        ValidationError: If ``bits`` is not 8 or 16.
    """
    if bits not in (8, 16):
        raise ValidationError(f"bits must be 8 or 16, got {bits}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    max_value = 2 ** bits - 1
    array = to_numpy_image(image)
    codes = np.rint(np.clip(array, 0.0, 1.0) * max_value).astype(np.uint8 if bits == 8 else np.uint16)
    try:
        ok = cv2.imwrite(str(path), cv2.cvtColor(codes, cv2.COLOR_RGB2BGR))
    except cv2.error as e:
        raise ImageIOError(f"Could not write image {path}: {e}") from e
    if not ok:
        raise ImageIOError(f"Could not write image {path}")
    logging.info(f"Saved image {path}")
    return path


def to_numpy_image(image: torch.Tensor) -> np.ndarray:
    """Convert a [1, C, H, W] or [C, H, W] tensor to an H x W x C float array."""
    if image.dim() == 4:
        if image.shape[0] != 1:
            raise ValidationError(f"Expected a single image, got batch of {image.shape[0]}")
        image = image[0]
    return image.detach().cpu().permute(1, 2, 0).numpy()


def from_numpy_image(array: np.ndarray) -> torch.Tensor:
    """Convert an H x W x C array to a contiguous [1, C, H, W] float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32)).permute(2, 0, 1).unsqueeze(0).contiguous()


def quantize(image: torch.Tensor, bits: int = 8) -> torch.Tensor:
    """Round values to the nearest code of a ``bits``-deep integer image."""
    max_value = float(2 ** bits - 1)
    return torch.round(image.clamp(0.0, 1.0) * max_value) / max_value


def _cubic_kernel(x: torch.Tensor, a: float = BICUBIC_A) -> torch.Tensor:
    ax = x.abs()
    ax2 = ax * ax
    ax3 = ax2 * ax
    near = ((a + 2) * ax3 - (a + 3) * ax2 + 1) * (ax <= 1)
    far = (a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a) * ((ax > 1) & (ax <= 2))
    return near + far


def _resize_matrix(in_size: int, out_size: int, scale: float, antialias: bool) -> torch.Tensor:
    """
    Build the [out_size, in_size] bicubic interpolation matrix for one axis.

    Pixel centres are aligned (x_in = (x_out + 0.5) / scale - 0.5); when downsampling
    with antialiasing the kernel is widened by 1 / scale. Borders use symmetric padding.
    """
    kernel_scale = scale if (antialias and scale < 1) else 1.0
    taps = math.ceil(4 / kernel_scale) + 2
    positions = (torch.arange(out_size, dtype=torch.float64) + 0.5) / scale - 0.5
    first = torch.floor(positions) - taps // 2 + 1
    indices = first.unsqueeze(1) + torch.arange(taps, dtype=torch.float64).unsqueeze(0)
    weights = _cubic_kernel((positions.unsqueeze(1) - indices) * kernel_scale)
    weights = weights / weights.sum(dim=1, keepdim=True)

    indices = indices.long()
    indices = torch.where(indices < 0, -indices - 1, indices)
    indices = torch.where(indices >= in_size, 2 * in_size - 1 - indices, indices)
    indices = indices.clamp(0, in_size - 1)

    matrix = torch.zeros(out_size, in_size, dtype=torch.float64)
    matrix.scatter_add_(1, indices, weights)
    return matrix


def bicubic_resize(image: torch.Tensor, factor: Factor, antialias: bool = True) -> torch.Tensor:
    """
    Resize a [N, C, H, W] tensor with the bicubic kernel (a = -0.5).

    Args:
        image: Input tensor; gradients flow through the resize.
        factor: Positive scale factor; output dims are round(factor x input dims).
        antialias: Widen the kernel when downsampling.

    Returns:
        torch.Tensor: Resized tensor, clamped to [0, 1].

    Raises:
        ValidationError: If the factor is not positive or an output dim would be 0.
    """
    factor = float(factor)
    if not factor > 0:
        raise ValidationError(f"Resize factor must be positive, got {factor}")
    ImageValidator.validate_tensor(image, name="resize input", channels=None)
    if factor == 1.0:
        return image.clone()

    in_h, in_w = image.shape[-2:]
    out_h = int(math.floor(factor * in_h + 0.5))
    out_w = int(math.floor(factor * in_w + 0.5))
    if out_h < 1 or out_w < 1:
        raise ValidationError(
            f"Resizing {in_h}x{in_w} by {factor} gives an empty {out_h}x{out_w} image"
        )

    rows = _resize_matrix(in_h, out_h, factor, antialias).to(image.device, image.dtype)
    cols = _resize_matrix(in_w, out_w, factor, antialias).to(image.device, image.dtype)
    resized = torch.einsum("oh,nchw,pw->ncop", rows, image, cols)
    return resized.clamp(0.0, 1.0)


def crop(image: torch.Tensor, top: int, left: int, height: int, width: int) -> torch.Tensor:
    """
    Crop a [N, C, H, W] tensor.

    Raises:
        ValidationError: If the window leaves the image.
    """
    img_h, img_w = image.shape[-2:]
    if top < 0 or left < 0 or top + height > img_h or left + width > img_w:
        raise ValidationError(
            f"Crop ({top}, {left}, {height}, {width}) exceeds image of size {img_h}x{img_w}"
        )
    return image[..., top:top + height, left:left + width]


def _crop_offsets(
    size: Tuple[int, int],
    crop_size: int,
    policy: str,
    generator: Optional[torch.Generator],
) -> Tuple[int, int]:
    height, width = size
    if crop_size > height or crop_size > width:
        raise ValidationError(
            f"Crop size {crop_size} is larger than the LR image ({height}x{width})"
        )
    if policy == "center":
        return (height - crop_size) // 2, (width - crop_size) // 2
    top = int(torch.randint(0, height - crop_size + 1, (1,), generator=generator))
    left = int(torch.randint(0, width - crop_size + 1, (1,), generator=generator))
    return top, left


def augment(pair: ImagePair, spec: AugmentationSpec,
            generator: Optional[torch.Generator] = None) -> ImagePair:
    """
    Apply crop, flip and rotation identically to both members of a pair.

    The HR crop is taken at (scale*y, scale*x, scale*s) whenever the LR crop is
    taken at (y, x, s), so alignment survives.

    Args:
        pair: Source pair.
        spec: Augmentation to apply.
        generator: rng state for random crop offsets; the output is a pure function
            of (pair, spec, generator state).

    Returns:
        ImagePair: The augmented pair.

    Raises:
        ValidationError: If the crop is larger than the LR image.
    """
    lr, hr, scale = pair.lr, pair.hr, pair.scale

    if spec.crop_size is not None:
        top, left = _crop_offsets(tuple(lr.shape[-2:]), spec.crop_size, spec.crop_policy, generator)
        lr = crop(lr, top, left, spec.crop_size, spec.crop_size)
        hr = crop(hr, scale * top, scale * left, scale * spec.crop_size, scale * spec.crop_size)

    if spec.hflip:
        lr = torch.flip(lr, dims=(-1,))
        hr = torch.flip(hr, dims=(-1,))

    if spec.rotation == 90:
        lr = torch.rot90(lr, k=1, dims=(-2, -1))
        hr = torch.rot90(hr, k=1, dims=(-2, -1))

    return ImagePair(lr=lr.contiguous(), hr=hr.contiguous(), scale=scale, identifier=pair.identifier)
