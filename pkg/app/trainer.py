########################
# SR Trainer           #
########################

from functools import partial
import logging
from pathlib import Path
from typing import Dict, List, Optional, Union

import pandas as pd
import torch
from torch import nn
from tqdm import tqdm

from app.checkpoint import Checkpoint
from app.datasets import PairedImageDataset, make_loader
from app.discriminator import PatchDiscriminator
from app.exceptions import CheckpointError, DatasetError, TrainingError
from app.feature_extractor import VGG16_LAYERS, VGGFeatureExtractor
from app.generator import Generator
from app.imaging import bicubic_resize
from app.losses import (
    AdversarialLossFactory,
    TERM_NAMES,
    TripletBatch,
    content_loss,
    fused_discriminator_loss,
    fused_generator_loss,
    perceptual_loss,
    qa_loss,
)
from app.metrics import LPIPSMetric, MetricsReport, evaluate
from app.qa_network import QANetwork, load_qa_network
from app.sr_config import SRConfig, TrainConfig
from app.step_record import StepRecord
from app.training_observers import TrainingObserver
from app.validators import ImageValidator

ImageOrCheckpoint = Union[str, Path, Checkpoint, Generator]


class OptimizerFactory:
    """Creates optimizers and learning-rate schedulers from an OptimizerConfig."""

    _optimizers: Dict[str, type] = {
        'adam': torch.optim.Adam,
    }

    @classmethod
    def list_optimizers(cls) -> list[str]:
        return list(cls._optimizers.keys())

    @classmethod
    def register_optimizer(cls, name: str, optimizer_class: type) -> None:
        if not issubclass(optimizer_class, torch.optim.Optimizer):
            raise TypeError("Optimizer class must inherit from torch.optim.Optimizer")
        cls._optimizers[name.lower()] = optimizer_class

    @classmethod
    def create_optimizer(cls, config, parameters, lr: float) -> torch.optim.Optimizer:
        optimizer_class = cls._optimizers.get(config.kind.lower())
        if not optimizer_class:
            raise ValueError(f"Unknown optimizer: {config.kind}")
        return optimizer_class(parameters, lr=lr, betas=(config.beta1, config.beta2))

    @staticmethod
    def create_scheduler(config, optimizer: torch.optim.Optimizer):
        """Constant by default; 'step' multiplies the rate by gamma every step_size steps."""
        if config.scheduler == "step":
            return torch.optim.lr_scheduler.StepLR(optimizer, step_size=config.step_size, gamma=config.gamma)
        return torch.optim.lr_scheduler.ConstantLR(optimizer, factor=1.0, total_iters=0)


def _set_requires_grad(module: nn.Module, flag: bool) -> None:
    for parameter in module.parameters():
        parameter.requires_grad_(flag)


class Trainer:
    """
    Alternating discriminator/generator optimisation of the SR GAN.

    Each step first updates D ``d_steps`` times on the fused discriminator loss, then
    updates G once on the fused generator loss. The QA network and the perceptual
    extractor are frozen critics. Observers are notified after every step.

    Args:
        config: Run configuration.
        dataset: Training pairs; crops and augmentation are the dataset's job.
        out_dir: Directory for checkpoints, the training log and reports.
        sr_config: Process settings (device, workers, LPIPS calibration).
        val_dataset: Held-out pairs for periodic validation.
        extractor: Perceptual extractor to use instead of building VGG-16.
        qa_model: QA network to use instead of loading ``config.qa_weights``.
        lpips_metric: LPIPS scorer for validation; None skips LPIPS there.
    """

    def __init__(
        self,
        config: TrainConfig,
        dataset: PairedImageDataset,
        out_dir: Union[str, Path],
        sr_config: Optional[SRConfig] = None,
        val_dataset: Optional[PairedImageDataset] = None,
        extractor: Optional[VGGFeatureExtractor] = None,
        qa_model: Optional[QANetwork] = None,
        lpips_metric: Optional[LPIPSMetric] = None,
    ):
        self.config = config
        self.config.validate()
        if dataset is None or len(dataset) == 0:
            raise DatasetError("Training needs a non-empty dataset")
        self.sr_config = sr_config or SRConfig()
        self.device = torch.device(self.sr_config.device)
        self.dataset = dataset
        self.val_dataset = val_dataset
        self.lpips_metric = lpips_metric
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

        torch.manual_seed(config.seed)
        self.generator = Generator(config.generator).to(self.device)
        self.discriminator = PatchDiscriminator(config.discriminator).to(self.device)
        self.weights = config.loss
        self.adversarial = AdversarialLossFactory.create_loss(config.adversarial)

        self.extractor = None
        if self.weights.perceptual > 0:
            if extractor is None:
                extractor = VGGFeatureExtractor(
                    VGG16_LAYERS, weights=config.perceptual.weights, widths=config.perceptual.widths
                )
            self.extractor = extractor.to(self.device)
        self.qa_model = None
        if config.use_qa and self.weights.qa > 0:
            qa_model = qa_model if qa_model is not None else self._load_qa_model()
            self.qa_model = qa_model.to(self.device).freeze()

        self.optimizer_g = OptimizerFactory.create_optimizer(
            config.optimizer, self.generator.parameters(), config.optimizer.lr_g
        )
        self.optimizer_d = OptimizerFactory.create_optimizer(
            config.optimizer, self.discriminator.parameters(), config.optimizer.lr_d
        )
        self.scheduler_g = OptimizerFactory.create_scheduler(config.optimizer, self.optimizer_g)
        self.scheduler_d = OptimizerFactory.create_scheduler(config.optimizer, self.optimizer_d)

        self.step = 0
        self.history: List[StepRecord] = []
        self.observers: List[TrainingObserver] = []
        logging.info(
            f"Trainer ready: adversarial={self.adversarial}, weights={self.weights.as_dict()}, "
            f"fingerprint={config.fingerprint()[:12]}"
        )

    def _load_qa_model(self) -> QANetwork:
        if self.config.qa_weights:
            return load_qa_network(self.config.qa_weights, device=str(self.device))
        logging.warning("No qa_weights configured; the QA loss uses a randomly initialised QA network")
        return QANetwork(self.config.qa)

    @property
    def checkpoint_dir(self) -> Path:
        return self.out_dir / "checkpoints"

    def add_observer(self, observer: TrainingObserver) -> None:
        self.observers.append(observer)
        logging.info(f"Added observer: {observer.__class__.__name__}")

    def remove_observer(self, observer: TrainingObserver) -> None:
        self.observers.remove(observer)
        logging.info(f"Removed observer: {observer.__class__.__name__}")

    def notify_observers(self, record: StepRecord) -> None:
        for observer in self.observers:
            observer.update(record)

    def _update_discriminator(self, triplet: TripletBatch) -> float:
        self.discriminator.train()
        gan_d = self.adversarial.discriminator_loss(self.discriminator, triplet)
        loss_d = fused_discriminator_loss(self.weights, gan_d)
        self.optimizer_d.zero_grad()
        loss_d.backward()
        self.optimizer_d.step()
        return float(gan_d)

    def _generator_components(self, sr: torch.Tensor, hr: torch.Tensor,
                              triplet: TripletBatch) -> Dict[str, torch.Tensor]:
        zero = sr.new_zeros(())
        components = {name: zero for name in TERM_NAMES}
        if self.weights.content > 0:
            components["content"] = content_loss(sr, hr)
        if self.qa_model is not None:
            components["qa"] = qa_loss(self.qa_model, sr, hr)
        if self.weights.gan > 0:
            components["gan"] = self.adversarial.generator_loss(self.discriminator, triplet)
        if self.extractor is not None:
            components["perceptual"] = perceptual_loss(self.extractor, sr, hr)
        return components

    def train_step(self, lr: torch.Tensor, hr: torch.Tensor) -> StepRecord:
        """
        Run one D update phase and one G update on a batch.

        D runs in train mode for its own updates and in eval mode during the G step,
        so G forwards never move its BatchNorm running statistics.

        Args:
            lr: [N, 3, h, w] LR crops.
            hr: [N, 3, scale*h, scale*w] matching HR crops.

        Returns:
            StepRecord: Loss values of this step (terms with zero weight are 0.0).

        Raises:
            TrainingError: If any loss term is non-finite; the error names the term and step.
        """
        ImageValidator.validate_pair(lr, hr, self.config.generator.scale)
        lr, hr = lr.to(self.device), hr.to(self.device)
        negative = bicubic_resize(lr, self.config.generator.scale)
        self.generator.train()

        try:
            gan_d, loss_d = 0.0, 0.0
            if self.weights.gan > 0:
                for _ in range(self.config.d_steps):
                    with torch.no_grad():
                        sr_fixed = self.generator(lr)
                    gan_d = self._update_discriminator(TripletBatch(sr_fixed, hr, negative))
                loss_d = self.weights.gan * gan_d

            # D is frozen for the G step: no grads, BatchNorm uses running stats
            _set_requires_grad(self.discriminator, False)
            self.discriminator.eval()
            try:
                sr = self.generator(lr)
                components = self._generator_components(sr, hr, TripletBatch(sr, hr, negative))
                loss_g = fused_generator_loss(self.weights, components)
            finally:
                _set_requires_grad(self.discriminator, True)
            self.optimizer_g.zero_grad()
            if loss_g.requires_grad:
                loss_g.backward()
                self.optimizer_g.step()
        except TrainingError as e:
            logging.error(f"Training aborted at step {self.step}: {e}")
            raise TrainingError(f"{e} at step {self.step}", term=e.term, step=self.step) from e

        self.scheduler_g.step()
        self.scheduler_d.step()
        record = StepRecord(
            step=self.step,
            content=float(components["content"]),
            qa=float(components["qa"]),
            gan_g=float(components["gan"]),
            gan_d=gan_d,
            perceptual=float(components["perceptual"]),
            loss_g=float(loss_g),
            loss_d=loss_d,
        )
        self.history.append(record)
        self.step += 1
        self.notify_observers(record)
        return record

    def train(self, progress: bool = False) -> Checkpoint:
        """
        Train from the current step up to ``config.total_steps`` and save a final checkpoint.

        Returns:
            Checkpoint: The final training state.

        Raises:
            TrainingError: On a non-finite loss.
            CheckpointError: If the output directory is not writable.
        """
        loader = make_loader(
            self.dataset, self.config.batch_size, self.config.seed,
            start_step=self.step, total_steps=self.config.total_steps,
            num_workers=self.config.num_workers or self.sr_config.num_workers,
        )
        logging.info(f"Training steps {self.step}..{self.config.total_steps - 1}")
        with tqdm(total=self.config.total_steps, initial=self.step, desc="Training",
                  disable=not progress) as bar:
            for lr, hr in loader:
                record = self.train_step(lr, hr)
                bar.update(1)
                bar.set_postfix(loss_g=f"{record.loss_g:.4f}", loss_d=f"{record.loss_d:.4f}")

        checkpoint = self.make_checkpoint()
        checkpoint.save(self.out_dir / "final.pt")
        self.save_history()
        return checkpoint

    def validate(self) -> Optional[MetricsReport]:
        """Score the generator on the held-out pairs, or return None when there are none."""
        if self.val_dataset is None:
            return None
        report = evaluate(partial(infer, self.generator), self.val_dataset,
                          lpips_metric=self.lpips_metric, metadata={"step": self.step})
        self.generator.train()
        return report

    def make_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            step=self.step,
            generator=self.generator.state_dict(),
            discriminator=self.discriminator.state_dict(),
            optimizer_g=self.optimizer_g.state_dict(),
            optimizer_d=self.optimizer_d.state_dict(),
            scheduler_g=self.scheduler_g.state_dict(),
            scheduler_d=self.scheduler_d.state_dict(),
            rng_state=torch.get_rng_state(),
            config=self.config.snapshot(),
            fingerprint=self.config.fingerprint(),
            history=[r.to_dict() for r in self.history],
        )

    def save_checkpoint(self, path: Union[str, Path, None] = None) -> Path:
        """Write the current state to ``path`` (default: checkpoints/step_XXXXXXXX.pt)."""
        path = Path(path) if path else self.checkpoint_dir / f"step_{self.step:08d}.pt"
        return self.make_checkpoint().save(path)

    def resume(self, source: Union[str, Path, Checkpoint]) -> None:
        """
        Restore networks, optimizers, schedulers, rng state and history.

        Raises:
            CheckpointError: If the checkpoint was made under a different configuration.
        """
        checkpoint = source if isinstance(source, Checkpoint) else Checkpoint.load(source)
        if checkpoint.fingerprint != self.config.fingerprint():
            raise CheckpointError(
                "Checkpoint was written under a different configuration "
                f"(fingerprint {checkpoint.fingerprint[:12]} vs {self.config.fingerprint()[:12]}); "
                "resume with the run config it was trained with"
            )
        try:
            self.generator.load_state_dict(checkpoint.generator)
            self.discriminator.load_state_dict(checkpoint.discriminator)
            self.optimizer_g.load_state_dict(checkpoint.optimizer_g)
            self.optimizer_d.load_state_dict(checkpoint.optimizer_d)
            if checkpoint.scheduler_g:
                self.scheduler_g.load_state_dict(checkpoint.scheduler_g)
            if checkpoint.scheduler_d:
                self.scheduler_d.load_state_dict(checkpoint.scheduler_d)
        except (RuntimeError, KeyError, ValueError) as e:
            raise CheckpointError(f"Checkpoint does not fit the configured networks: {e}") from e
        if checkpoint.rng_state is not None:
            torch.set_rng_state(checkpoint.rng_state)
        self.history = [StepRecord.from_dict(r) for r in checkpoint.history]
        self.step = checkpoint.step
        logging.info(f"Resumed at step {self.step}")

    def get_history_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_dict() for r in self.history])

    def save_history(self, path: Union[str, Path, None] = None) -> Path:
        """Write the step history as CSV (default: <out_dir>/history.csv)."""
        path = Path(path) if path else self.out_dir / "history.csv"
        self.get_history_dataframe().to_csv(path, index=False)
        logging.info(f"History with {len(self.history)} steps saved to {path}")
        return path


def load_generator(source: Union[str, Path, Checkpoint], device: str = "cpu") -> Generator:
    """
    Build a generator from a checkpoint's config snapshot and parameters.

    Raises:
        CheckpointError: If the checkpoint is missing, corrupt, of another version or
            its parameters do not fit its own config.
    """
    checkpoint = source if isinstance(source, Checkpoint) else Checkpoint.load(source)
    try:
        config = TrainConfig.from_snapshot(checkpoint.config)
        generator = Generator(config.generator)
        generator.load_state_dict(checkpoint.generator)
    except Exception as e:
        raise CheckpointError(f"Cannot rebuild the generator from the checkpoint: {e}") from e
    return generator.to(device).eval()


def infer(model: ImageOrCheckpoint, image: torch.Tensor) -> torch.Tensor:
    """
    Super-resolve ``image`` with the generator in eval mode; the output is clamped to [0, 1].

    Args:
        model: A Generator, a Checkpoint or a checkpoint path.
        image: [N, 3, H, W] LR tensor in [0, 1].

    Returns:
        torch.Tensor: [N, 3, scale*H, scale*W] on the input's device.
    """
    generator = model if isinstance(model, Generator) else load_generator(model)
    ImageValidator.validate_tensor(image, name="I_LR", value_range=(0.0, 1.0))
    device = next(generator.parameters()).device
    generator.eval()
    with torch.no_grad():
        output = generator(image.to(device))
    return output.clamp(0.0, 1.0).to(image.device)
