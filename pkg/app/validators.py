########################
# Input Validation     #
########################

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import torch

from app.exceptions import ValidationError


@dataclass
class ImageValidator:
    """Validates image tensors, LR/HR pairs and patch geometry."""

    @staticmethod
    def validate_tensor(
        tensor: torch.Tensor,
        name: str = "image",
        channels: Optional[int] = 3,
        value_range: Optional[Tuple[float, float]] = None,
    ) -> torch.Tensor:
        """
        Validate a [N, C, H, W] tensor.

        Args:
            tensor: Tensor to validate.
            name: Name used in error messages.
            channels: Required channel count, or None to accept any.
            value_range: Closed interval the values must lie in, or None to skip the check.

        Returns:
            torch.Tensor: The same tensor, unchanged.

        Raises:
            ValidationError: If the tensor is not 4-D, has the wrong channel count,
                contains non-finite values or leaves the declared range.
        """
        if not isinstance(tensor, torch.Tensor):
            raise ValidationError(f"{name} must be a torch.Tensor, got {type(tensor).__name__}")
        if tensor.dim() != 4:
            raise ValidationError(f"{name} must have shape [N, C, H, W], got {tuple(tensor.shape)}")
        if channels is not None and tensor.shape[1] != channels:
            raise ValidationError(
                f"{name} must have {channels} channels, got {tensor.shape[1]}"
            )
        if not torch.isfinite(tensor).all():
            raise ValidationError(f"{name} contains non-finite values")
        if value_range is not None:
            low, high = value_range
            if tensor.numel() and (tensor.min() < low or tensor.max() > high):
                raise ValidationError(f"{name} values must lie in [{low}, {high}]")
        return tensor

    @staticmethod
    def validate_same_shape(a: torch.Tensor, b: torch.Tensor, names: Sequence[str] = ("a", "b")) -> None:
        """
        Ensure two tensors share one shape.

        Raises:
            ValidationError: If the shapes differ.
        """
        if a.shape != b.shape:
            raise ValidationError(
                f"Shape mismatch: {names[0]} {tuple(a.shape)} vs {names[1]} {tuple(b.shape)}"
            )

    @staticmethod
    def validate_pair(lr: torch.Tensor, hr: torch.Tensor, scale: int) -> None:
        """
        Check the LR/HR scale contract: hr spatial dims = scale x lr spatial dims exactly.

        Raises:
            ValidationError: If batch, channels or spatial dims do not line up.
        """
        if lr.shape[:2] != hr.shape[:2]:
            raise ValidationError(
                f"LR {tuple(lr.shape)} and HR {tuple(hr.shape)} differ in batch or channels"
            )
        lr_h, lr_w = lr.shape[-2:]
        hr_h, hr_w = hr.shape[-2:]
        if hr_h != scale * lr_h or hr_w != scale * lr_w:
            raise ValidationError(
                f"HR size {hr_h}x{hr_w} is not {scale}x the LR size {lr_h}x{lr_w}"
            )

    @staticmethod
    def validate_patch(patch: Sequence[int], height: int, width: int) -> Tuple[int, int, int, int]:
        """
        Validate an (x, y, w, h) patch against an image of the given size.

        Returns:
            Tuple[int, int, int, int]: The patch as integers.

        Raises:
            ValidationError: If the patch is empty or leaves the image.
        """
        if len(patch) != 4:
            raise ValidationError(f"Patch must be x,y,w,h, got {list(patch)}")
        x, y, w, h = (int(v) for v in patch)
        if w <= 0 or h <= 0:
            raise ValidationError(f"Patch width and height must be positive, got {w}x{h}")
        if x < 0 or y < 0 or x + w > width or y + h > height:
            raise ValidationError(
                f"Patch ({x}, {y}, {w}, {h}) is out of bounds for a {width}x{height} image"
            )
        return x, y, w, h
