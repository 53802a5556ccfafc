########################
# Evaluation Metrics   #
########################

from dataclasses import dataclass, field
import json
import logging
import math
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import pandas as pd
import torch
from torch.nn import functional as F
from tqdm import tqdm

from app.datasets import PairedImageDataset
from app.exceptions import MetricError
from app.feature_extractor import (
    LPIPS_LAYERS,
    VGGFeatureExtractor,
    load_lpips_calibration,
    normalize_channels,
)
from app.imaging import bicubic_resize
from app.validators import ImageValidator

CONVENTIONS = ("rgb", "y")
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

Upscaler = Callable[[torch.Tensor], torch.Tensor]


def rgb_to_y(image: torch.Tensor) -> torch.Tensor:
    """ITU-R BT.601 studio-range luma of a [0, 1] RGB tensor, returned as [N, 1, H, W]."""
    ImageValidator.validate_tensor(image, name="RGB image")
    r, g, b = image[:, 0:1], image[:, 1:2], image[:, 2:3]
    return 16.0 / 255.0 + (65.481 * r + 128.553 * g + 24.966 * b) / 255.0


def shave(image: torch.Tensor, border: int) -> torch.Tensor:
    """Drop ``border`` pixels from every side."""
    if border <= 0:
        return image
    if min(image.shape[-2:]) <= 2 * border:
        raise MetricError(f"Cannot crop {border} border pixels from a {tuple(image.shape[-2:])} image")
    return image[..., border:-border, border:-border]


def psnr(a: torch.Tensor, b: torch.Tensor, max_val: float = 1.0) -> float:
    """
    Peak signal-to-noise ratio in dB; identical inputs give ``math.inf``.

    Raises:
        ValidationError: If the shapes differ.
    """
    ImageValidator.validate_same_shape(a, b, ("a", "b"))
    mse = float(torch.mean((a.double() - b.double()) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / mse)


def _gaussian_window(size: int, sigma: float, channels: int) -> torch.Tensor:
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(coords ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    window = torch.outer(g, g)
    return window.expand(channels, 1, size, size).contiguous()


def ssim(a: torch.Tensor, b: torch.Tensor, data_range: float = 1.0) -> float:
    """
    Mean structural similarity with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.

    Local statistics are taken only where the window fits inside the image; the
    per-channel means are averaged.

    Raises:
        ValidationError: If the shapes differ.
        MetricError: If the image is smaller than the window.
    """
    ImageValidator.validate_same_shape(a, b, ("a", "b"))
    if a.dim() != 4:
        raise MetricError(f"SSIM expects [N, C, H, W] tensors, got {tuple(a.shape)}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise MetricError(
            f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {tuple(a.shape[-2:])}"
        )
    x, y = a.double(), b.double()
    channels = x.shape[1]
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA, channels).to(x.device)

    def filt(t: torch.Tensor) -> torch.Tensor:
        return F.conv2d(t, window, groups=channels)

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x ** 2
    var_y = filt(y * y) - mu_y ** 2
    cov = filt(x * y) - mu_x * mu_y
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2))
    return float(ssim_map.mean())


def lpips(extractor: VGGFeatureExtractor, a: torch.Tensor, b: torch.Tensor,
          weights: Sequence[torch.Tensor]) -> torch.Tensor:
    """
    Per-item LPIPS distance.

    For every layer: unit-normalise the channel vectors, square the difference, weight
    channels by the calibration vector, sum channels and average spatially; then sum
    over layers.

    Returns:
        torch.Tensor: [N] distances, all >= 0.
    """
    ImageValidator.validate_same_shape(a, b, ("a", "b"))
    if len(weights) != len(extractor.layers):
        raise MetricError(f"LPIPS needs {len(extractor.layers)} calibration vectors, got {len(weights)}")
    features_a, features_b = extractor(a), extractor(b)
    total = a.new_zeros(a.shape[0])
    for name, w in zip(extractor.layers, weights):
        diff = (normalize_channels(features_a[name]) - normalize_channels(features_b[name])) ** 2
        weighted = (diff * w.to(diff).view(1, -1, 1, 1)).sum(dim=1)
        total = total + weighted.mean(dim=(1, 2))
    return total


class LPIPSMetric:
    """
    LPIPS with a frozen VGG-16 backbone and external calibration weights.

    Args:
        calibration: Calibration file (see docs/LPIPS_CALIBRATION.md); ignored when
            ``weights`` is given.
        vgg_weights: Backbone weights passed to VGGFeatureExtractor.
        extractor: A ready extractor over LPIPS_LAYERS, e.g. a tiny one in tests.
        weights: Calibration vectors matching ``extractor``.

    Raises:
        MetricError: If the calibration is missing or malformed.
    """

    def __init__(self, calibration: Union[str, Path, None] = None, vgg_weights: Union[str, Path] = "imagenet",
                 extractor: Optional[VGGFeatureExtractor] = None,
                 weights: Optional[Sequence[torch.Tensor]] = None, device: str = "cpu"):
        # Missing calibration fails before the backbone is built
        if weights is None and (calibration is None or not Path(calibration).is_file()):
            load_lpips_calibration(calibration)
        if extractor is None:
            extractor = VGGFeatureExtractor(LPIPS_LAYERS, weights=vgg_weights, input_norm="lpips")
        self.extractor = extractor.to(device)
        if weights is None:
            expected = [self.extractor.channels(name) for name in self.extractor.layers]
            weights = load_lpips_calibration(calibration, expected_channels=expected)
        self.weights = [torch.as_tensor(w, dtype=torch.float32).to(device) for w in weights]
        self.device = device

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> float:
        with torch.no_grad():
            return float(lpips(self.extractor, a.to(self.device), b.to(self.device), self.weights).mean())


########################
# Reports              #
########################

@dataclass
class ImageMetrics:
    identifier: str
    psnr: float
    ssim: float
    lpips: Optional[float] = None


def _json_number(value: Optional[float]) -> Any:
    if value is None:
        return None
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def _from_json_number(value: Any) -> Optional[float]:
    return None if value is None else float(value)


@dataclass
class MetricsReport:
    """
    Per-image PSNR/SSIM/LPIPS plus arithmetic-mean aggregates and provenance metadata.

    Infinite PSNR (identical images) is written to JSON as the string "inf".
    """

    records: List[ImageMetrics] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def aggregates(self) -> Dict[str, Optional[float]]:
        if not self.records:
            raise MetricError("Cannot aggregate an empty report")
        n = len(self.records)
        lpips_values = [r.lpips for r in self.records]
        return {
            "psnr": sum(r.psnr for r in self.records) / n,
            "ssim": sum(r.ssim for r in self.records) / n,
            "lpips": None if any(v is None for v in lpips_values) else sum(lpips_values) / n,
        }

    def aggregates_json(self) -> Dict[str, Any]:
        return {k: _json_number(v) for k, v in self.aggregates().items()}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "metadata": self.metadata,
            "count": len(self.records),
            "aggregates": self.aggregates_json(),
            "records": [
                {"identifier": r.identifier, "psnr": _json_number(r.psnr),
                 "ssim": r.ssim, "lpips": _json_number(r.lpips)}
                for r in self.records
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricsReport":
        return cls(
            records=[
                ImageMetrics(r["identifier"], float(r["psnr"]), float(r["ssim"]), _from_json_number(r["lpips"]))
                for r in data["records"]
            ],
            metadata=dict(data.get("metadata", {})),
        )

    def save(self, path: Union[str, Path], encoding: str = "utf-8") -> Path:
        """Write the report as JSON, and the per-image rows as CSV next to it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2), encoding=encoding)
        self.to_dataframe().to_csv(path.with_suffix(".csv"), index=False)
        logging.info(f"Metrics report with {len(self)} images written to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path], encoding: str = "utf-8") -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding=encoding)))

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame([
            {"identifier": r.identifier, "psnr": r.psnr, "ssim": r.ssim, "lpips": r.lpips}
            for r in self.records
        ])

    def to_table(self, name: str = "Mean") -> str:
        """Human-readable aggregate table with PSNR / SSIM / LPIPS columns."""
        agg = self.aggregates()
        lpips_text = "-" if agg["lpips"] is None else f"{agg['lpips']:.4f}"
        psnr_text = "inf" if math.isinf(agg["psnr"]) else f"{agg['psnr']:.2f}"
        header = f"{'Method':<20} {'PSNR ↑':>8} {'SSIM ↑':>8} {'LPIPS ↓':>8}"
        row = f"{name:<20} {psnr_text:>8} {agg['ssim']:>8.4f} {lpips_text:>8}"
        return f"{header}\n{'-' * len(header)}\n{row}"


def evaluate_pairs(
    pairs: Iterable[Tuple[str, torch.Tensor, torch.Tensor]],
    convention: str = "rgb",
    crop_border: int = 0,
    lpips_metric: Optional[LPIPSMetric] = None,
    metadata: Optional[Dict[str, Any]] = None,
    progress: bool = False,
) -> MetricsReport:
    """
    Score ``(identifier, sr, hr)`` triples.

    PSNR and SSIM use the requested channel convention at max value 1; LPIPS always
    sees the RGB images. Any failure propagates; no partial report is returned.

    Raises:
        MetricError: For an unknown convention or images too small for a metric.
    """
    if convention not in CONVENTIONS:
        raise MetricError(f"convention must be one of {CONVENTIONS}, got '{convention}'")
    report = MetricsReport(metadata={
        "value_range": "[0,1]",
        "max_val": 1.0,
        "convention": convention,
        "crop_border": crop_border,
        "lpips": lpips_metric is not None,
        **(metadata or {}),
    })
    for identifier, sr, hr in tqdm(pairs, desc="Evaluating", disable=not progress):
        ImageValidator.validate_same_shape(sr, hr, (f"SR '{identifier}'", f"HR '{identifier}'"))
        sr, hr = shave(sr.clamp(0, 1), crop_border), shave(hr, crop_border)
        fidelity_sr, fidelity_hr = (rgb_to_y(sr), rgb_to_y(hr)) if convention == "y" else (sr, hr)
        report.records.append(ImageMetrics(
            identifier=identifier,
            psnr=psnr(fidelity_sr, fidelity_hr),
            ssim=ssim(fidelity_sr, fidelity_hr),
            lpips=lpips_metric(sr, hr) if lpips_metric is not None else None,
        ))
    return report


def bicubic_upscaler(scale: int = 4) -> Upscaler:
    """Upscaler for the bicubic baseline."""
    def upscale(image: torch.Tensor) -> torch.Tensor:
        return bicubic_resize(image, scale)
    return upscale


def evaluate(
    upscaler: Optional[Upscaler],
    dataset: PairedImageDataset,
    convention: str = "rgb",
    crop_border: int = 0,
    lpips_metric: Optional[LPIPSMetric] = None,
    metadata: Optional[Dict[str, Any]] = None,
    progress: bool = False,
) -> MetricsReport:
    """
    Super-resolve every pair of ``dataset`` and score it against its HR image.

    Args:
        upscaler: Maps an LR tensor to SR, e.g. ``functools.partial(infer, generator)``;
            None evaluates the bicubic baseline.

    Returns:
        MetricsReport: One record per dataset pair.
    """
    upscale = upscaler or bicubic_upscaler(dataset.scale)
    metadata = {"dataset": str(dataset.root), **(metadata or {})}
    if upscaler is None:
        metadata.setdefault("method", "bicubic")

    def pairs():
        for index in range(len(dataset)):
            pair = dataset.pair(index)
            with torch.no_grad():
                sr = upscale(pair.lr)
            yield pair.identifier, sr.cpu(), pair.hr

    report = evaluate_pairs(pairs(), convention, crop_border, lpips_metric, metadata, progress)
    if len(report) != len(dataset):
        raise MetricError(f"Report has {len(report)} records for {len(dataset)} pairs")
    return report
