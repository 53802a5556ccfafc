from pathlib import Path

import cv2
import numpy as np
import pytest
import torch

from app.discriminator import DiscriminatorConfig
from app.feature_extractor import VGG16_LAYERS, VGGFeatureExtractor
from app.generator import GeneratorConfig
from app.imaging import bicubic_resize, from_numpy_image, quantize, save_image
from app.losses import LossWeights
from app.qa_network import QAConfig
from app.sr_config import PerceptualConfig, SRConfig, TrainConfig

TINY_VGG_WIDTHS = (4, 8, 16, 32, 32)

TINY_RUN_CONFIG = """\
[training]
batch_size = 2
crop_size = 8
total_steps = 4
checkpoint_every = 2
{seed_line}
[generator]
base_channels = 8
n_rir = 1
resblocks_per_rir = 1
ca_reduction = 4

[discriminator]
n_layers = 3
strides = 2,1,1
base_channels = 4

[qa]
block_channels = 4,8,8,8
hidden_units = 8

[perceptual]
weights = random
widths = 4,8,16,32,32
"""


# Keep every test away from the developer's environment and log directory
@pytest.fixture(autouse=True)
def isolated_env(tmp_path, monkeypatch):
    for name in ("TRIPLETSR_BASE_DIR", "SRTGAN_DATA_ROOT", "TRIPLETSR_DATA_ROOT", "TRIPLETSR_DEVICE", "TRIPLETSR_NUM_WORKERS",
                 "TRIPLETSR_LPIPS_CALIBRATION", "TRIPLETSR_VGG_WEIGHTS", "TRIPLETSR_DEFAULT_ENCODING",
                 "TRIPLETSR_LOG_FILE"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setenv("TRIPLETSR_LOG_DIR", str(tmp_path / "logs"))


@pytest.fixture
def sr_config(tmp_path):
    return SRConfig(base_dir=tmp_path)


@pytest.fixture
def tiny_generator_config():
    return GeneratorConfig(base_channels=8, n_rir=1, resblocks_per_rir=1, ca_reduction=4)


@pytest.fixture
def tiny_discriminator_config():
    return DiscriminatorConfig(n_layers=3, strides=[2, 1, 1], base_channels=4)


@pytest.fixture
def tiny_qa_config():
    return QAConfig(block_channels=[4, 8, 8, 8], hidden_units=8)


@pytest.fixture
def tiny_extractor():
    torch.manual_seed(0)
    return VGGFeatureExtractor(VGG16_LAYERS, weights="random", widths=TINY_VGG_WIDTHS)


@pytest.fixture
def tiny_train_config(tiny_generator_config, tiny_discriminator_config, tiny_qa_config):
    return TrainConfig(
        batch_size=2,
        crop_size=8,
        total_steps=4,
        checkpoint_every=0,
        loss=LossWeights(),
        generator=tiny_generator_config,
        discriminator=tiny_discriminator_config,
        qa=tiny_qa_config,
        perceptual=PerceptualConfig(weights="random", widths=list(TINY_VGG_WIDTHS)),
    )


def smooth_image(rng: np.random.Generator, size: int) -> torch.Tensor:
    """A [1, 3, size, size] image of low-frequency colour blobs in [0.1, 0.9]."""
    coarse = rng.uniform(0.1, 0.9, size=(size // 8 + 1, size // 8 + 1, 3)).astype(np.float32)
    fine = cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    return from_numpy_image(np.clip(fine, 0.0, 1.0))


def write_pairs(root: Path, identifiers, hr_size: int = 64, seed: int = 0,
                index: str = "train.txt") -> Path:
    """Write {id}_HR.png and a bicubic-downsampled {id}_LR.png per identifier plus an index file."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for identifier in identifiers:
        hr = quantize(smooth_image(rng, hr_size))
        save_image(hr, root / f"{identifier}_HR.png")
        save_image(quantize(bicubic_resize(hr, 0.25)), root / f"{identifier}_LR.png")
    (root / index).write_text("\n".join(identifiers) + "\n", encoding="utf-8")
    return root


@pytest.fixture
def paired_root(tmp_path):
    root = write_pairs(tmp_path / "data", ["img0", "img1", "img2", "img3"])
    (root / "val.txt").write_text("img0\nimg1\n", encoding="utf-8")
    (root / "test.txt").write_text("img2\nimg3\n", encoding="utf-8")
    return root


@pytest.fixture
def run_config_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(TINY_RUN_CONFIG.format(seed_line="seed = 0\n"), encoding="utf-8")
    return path


def central_difference(function, tensor: torch.Tensor, indices, eps: float = 1e-6):
    """Central finite-difference derivative of scalar ``function()`` w.r.t. tensor entries."""
    values = []
    flat = tensor.data.view(-1)
    for index in indices:
        original = flat[index].item()
        flat[index] = original + eps
        plus = float(function())
        flat[index] = original - eps
        minus = float(function())
        flat[index] = original
        values.append((plus - minus) / (2 * eps))
    return torch.tensor(values, dtype=torch.float64)


@pytest.fixture
def gradient_check():
    """
    Compare autograd with central differences at a few entries of ``tensor``.

    Returns the largest relative error.
    """
    def check(function, tensor: torch.Tensor, n_entries: int = 6, seed: int = 0) -> float:
        tensor.requires_grad_(True)
        tensor.grad = None
        function().backward()
        analytic = tensor.grad.detach().reshape(-1)
        generator = torch.Generator().manual_seed(seed)
        indices = torch.randperm(tensor.numel(), generator=generator)[:n_entries].tolist()
        with torch.no_grad():
            numeric = central_difference(function, tensor, indices)
        expected = analytic[indices]
        scale = torch.maximum(expected.abs(), numeric.abs()).clamp_min(1e-6)
        return float(((expected - numeric).abs() / scale).max())
    return check
