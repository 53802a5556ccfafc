########################
# Quality Assessment   #
########################

from dataclasses import asdict, dataclass, field
import json
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
import torch
from torch import nn
from torch.nn import functional as F
from torch.utils.data import DataLoader

from app.datasets import (
    EpochBatchSampler,
    QAPairDataset,
    QARecord,
    read_qa_manifest,
    split_by_reference,
)
from app.exceptions import CheckpointError, ConfigurationError, DatasetError, ValidationError

QA_FORMAT = "qa-network"
QA_FORMAT_VERSION = 1


@dataclass
class QAConfig:
    """
    Two-path VGG-style quality scorer.

    Each block is two 3x3 convs, the second with stride 2. Both inputs share the first
    ``subtract_after`` blocks; their feature difference feeds the remaining blocks,
    global average pooling and a dropout MLP head whose output is squashed into
    ``score_range`` by a scaled sigmoid.
    """

    n_vgg_blocks: int = 4
    block_channels: List[int] = field(default_factory=lambda: [32, 64, 128, 256])
    subtract_after: int = 2
    hidden_units: int = 128
    dropout_rate: float = 0.5
    score_range: Tuple[float, float] = (1.0, 5.0)

    def validate(self) -> None:
        if len(self.block_channels) != self.n_vgg_blocks:
            raise ConfigurationError(
                f"qa.block_channels has {len(self.block_channels)} entries for {self.n_vgg_blocks} blocks"
            )
        if not 1 <= self.subtract_after <= self.n_vgg_blocks:
            raise ConfigurationError(f"qa.subtract_after must be in [1, {self.n_vgg_blocks}]")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigurationError(f"qa.dropout_rate must be in [0, 1), got {self.dropout_rate}")
        low, high = self.score_range
        if not low < high:
            raise ConfigurationError(f"qa.score_range must be increasing, got {self.score_range}")


class QANetwork(nn.Module):
    """Siamese full-reference quality scorer returning one score per batch item."""

    def __init__(self, config: QAConfig = None):
        super().__init__()
        self.config = config or QAConfig()
        self.config.validate()
        in_channels = 3
        for i, width in enumerate(self.config.block_channels):
            self.add_module(f"block{i}", nn.Sequential(
                nn.Conv2d(in_channels, width, 3, padding=1),
                nn.ReLU(),
                nn.Conv2d(width, width, 3, stride=2, padding=1),
                nn.ReLU(),
            ))
            in_channels = width
        self.head = nn.Sequential(
            nn.Dropout(self.config.dropout_rate),
            nn.Linear(in_channels, self.config.hidden_units),
            nn.ReLU(),
            nn.Dropout(self.config.dropout_rate),
            nn.Linear(self.config.hidden_units, 1),
        )

    def _blocks(self, x: torch.Tensor, start: int, stop: int) -> torch.Tensor:
        for i in range(start, stop):
            x = getattr(self, f"block{i}")(x)
        return x

    def forward(self, primary: torch.Tensor, reference: torch.Tensor) -> torch.Tensor:
        """
        Score ``primary`` against ``reference``.

        Returns:
            torch.Tensor: [N] scores inside ``config.score_range``.

        Raises:
            ValidationError: If the inputs differ in shape or are not 3-channel.
        """
        if primary.shape != reference.shape:
            raise ValidationError(
                f"QA paths need equal shapes, got {tuple(primary.shape)} and {tuple(reference.shape)}"
            )
        if primary.dim() != 4 or primary.shape[1] != 3:
            raise ValidationError(f"QA inputs must be [N, 3, H, W], got {tuple(primary.shape)}")
        split = self.config.subtract_after
        both = self._blocks(torch.cat([primary, reference], dim=0), 0, split)
        primary_features, reference_features = both.chunk(2, dim=0)
        difference = self._blocks(primary_features - reference_features, split, self.config.n_vgg_blocks)
        pooled = F.adaptive_avg_pool2d(difference, 1).flatten(1)
        low, high = self.config.score_range
        return low + (high - low) * torch.sigmoid(self.head(pooled).squeeze(1))

    def freeze(self) -> "QANetwork":
        """Put the network in eval mode and stop gradients reaching its parameters."""
        self.eval()
        for parameter in self.parameters():
            parameter.requires_grad_(False)
        return self


def save_qa_network(model: QANetwork, path: Union[str, Path]) -> Path:
    """Write the QA network parameters and config to a single file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    config = asdict(model.config)
    config["score_range"] = list(config["score_range"])
    torch.save({
        "format": QA_FORMAT,
        "format_version": QA_FORMAT_VERSION,
        "config": config,
        "state_dict": model.state_dict(),
    }, path)
    logging.info(f"Saved QA network to {path}")
    return path


def load_qa_network(path: Union[str, Path], device: str = "cpu") -> QANetwork:
    """
    Load a frozen QA network.

    Raises:
        CheckpointError: If the file is missing or not a QA network file.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"QA network file not found: {path}")
    try:
        payload = torch.load(path, map_location=device, weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Could not read QA network {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != QA_FORMAT:
        raise CheckpointError(f"{path} is not a QA network file")
    if payload.get("format_version") != QA_FORMAT_VERSION:
        raise CheckpointError(
            f"QA network {path} has version {payload.get('format_version')}, expected {QA_FORMAT_VERSION}"
        )
    config = dict(payload["config"])
    config["score_range"] = tuple(config["score_range"])
    model = QANetwork(QAConfig(**config))
    model.load_state_dict(payload["state_dict"])
    return model.to(device).freeze()


########################
# QA Training          #
########################

@dataclass
class QATrainConfig:
    """Schedule for fitting the QA network to MOS labels."""

    epochs: int = 10
    batch_size: int = 8
    learning_rate: float = 1e-4
    crop_size: Optional[int] = 192
    seed: int = 0
    split_ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    device: str = "cpu"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError("qa_train.epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("qa_train.batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("qa_train.learning_rate must be positive")
        if abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigurationError(f"qa_train.split_ratios must sum to 1, got {self.split_ratios}")


@dataclass
class QATrainResult:
    """Outcome of QA training: the fitted model, splits and errors."""

    model: QANetwork
    splits: Dict[str, List[QARecord]]
    epoch_losses: List[float]
    val_mse: float
    test_mse: float
    baseline_test_mse: float

    def split_sizes(self) -> Dict[str, int]:
        return {name: len(records) for name, records in self.splits.items()}

    def summary(self) -> Dict[str, object]:
        return {
            "split_sizes": self.split_sizes(),
            "epoch_losses": self.epoch_losses,
            "val_mse": self.val_mse,
            "test_mse": self.test_mse,
            "baseline_test_mse": self.baseline_test_mse,
        }

    def write_report(self, path: Union[str, Path]) -> Tuple[Path, Path]:
        """
        Write the split report: a JSON summary plus a CSV assigning every record to a split.

        Returns:
            Tuple[Path, Path]: The JSON and CSV paths.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.summary(), indent=2), encoding="utf-8")
        rows = [
            {"split": name, "reference_path": str(r.reference), "distorted_path": str(r.distorted), "mos": r.mos}
            for name, records in self.splits.items() for r in records
        ]
        csv_path = path.with_suffix(".csv")
        pd.DataFrame(rows).to_csv(csv_path, index=False)
        return path, csv_path


class QATrainer:
    """Fits a QANetwork by minimising squared error against MOS on the train split."""

    def __init__(self, qa_config: QAConfig = None, train_config: QATrainConfig = None):
        self.qa_config = qa_config or QAConfig()
        self.train_config = train_config or QATrainConfig()
        self.qa_config.validate()
        self.train_config.validate()

    def _mean_squared_error(self, model: QANetwork, records: Sequence[QARecord]) -> float:
        dataset = QAPairDataset(records, crop_size=None)
        model.eval()
        errors = []
        with torch.no_grad():
            for index in range(len(dataset)):
                distorted, reference, mos = dataset[index]
                device = self.train_config.device
                score = model(distorted.unsqueeze(0).to(device), reference.unsqueeze(0).to(device))
                errors.append(float((score.cpu() - mos) ** 2))
        return sum(errors) / len(errors)

    def train(self, records: Sequence[QARecord]) -> QATrainResult:
        """
        Split ``records`` 70/10/20 by reference image and fit the network.

        Raises:
            DatasetError: If there are no records or a split is empty.
        """
        if not records:
            raise DatasetError("QA training needs at least one record")
        cfg = self.train_config
        splits = split_by_reference(records, cfg.seed, cfg.split_ratios)
        logging.info(f"QA splits: { {k: len(v) for k, v in splits.items()} }")

        torch.manual_seed(cfg.seed)
        model = QANetwork(self.qa_config).to(cfg.device)
        optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)

        dataset = QAPairDataset(splits["train"], crop_size=cfg.crop_size, seed=cfg.seed)
        sampler = EpochBatchSampler(len(dataset), cfg.batch_size, cfg.seed)
        steps_per_epoch = sampler.batches_per_epoch
        sampler.total_steps = cfg.epochs * steps_per_epoch
        loader = DataLoader(dataset, batch_sampler=sampler)

        epoch_losses, running = [], []
        model.train()
        for step, (distorted, reference, mos) in enumerate(loader):
            distorted, reference, mos = (t.to(cfg.device) for t in (distorted, reference, mos))
            loss = F.mse_loss(model(distorted, reference), mos)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            running.append(float(loss))
            if (step + 1) % steps_per_epoch == 0:
                epoch_losses.append(sum(running) / len(running))
                logging.info(f"QA epoch {len(epoch_losses)}: train_mse={epoch_losses[-1]:.6f}")
                running = []

        train_mean = sum(r.mos for r in splits["train"]) / len(splits["train"])
        baseline = sum((r.mos - train_mean) ** 2 for r in splits["test"]) / len(splits["test"])
        result = QATrainResult(
            model=model.freeze(),
            splits=splits,
            epoch_losses=epoch_losses,
            val_mse=self._mean_squared_error(model, splits["val"]),
            test_mse=self._mean_squared_error(model, splits["test"]),
            baseline_test_mse=baseline,
        )
        logging.info(
            f"QA training done: val_mse={result.val_mse:.6f} test_mse={result.test_mse:.6f} "
            f"baseline_test_mse={baseline:.6f}"
        )
        return result


def qa_train(manifest: Union[str, Path, Sequence[QARecord]], qa_config: QAConfig = None,
             train_config: QATrainConfig = None) -> QATrainResult:
    """Train a QA network from a manifest path or a list of records."""
    records = read_qa_manifest(manifest) if isinstance(manifest, (str, Path)) else list(manifest)
    return QATrainer(qa_config, train_config).train(records)
