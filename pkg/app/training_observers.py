########################
# Training Observers   #
########################

from abc import ABC, abstractmethod
import json
import logging
from pathlib import Path
from typing import Any, Union

from app.step_record import StepRecord


class TrainingObserver(ABC):
    """
    Interface for objects notified after every completed training step.
    """

    @abstractmethod
    def update(self, record: StepRecord) -> None:
        """
        Handle a completed step.

        Args:
            record (StepRecord): Loss values of the step.
        """
        pass  # pragma: no cover


class LoggingObserver(TrainingObserver):
    """
    Appends one ``key=value`` line per step to the training log and mirrors every
    ``log_every``-th step to the application log.
    """

    def __init__(self, log_path: Union[str, Path], log_every: int = 1, encoding: str = "utf-8"):
        self.log_path = Path(log_path)
        self.log_every = max(1, log_every)
        self.encoding = encoding
        self.log_path.parent.mkdir(parents=True, exist_ok=True)

    def update(self, record: StepRecord) -> None:
        if record is None:
            raise AttributeError("Step record cannot be None")
        line = record.to_log_line()
        with open(self.log_path, "a", encoding=self.encoding) as handle:
            handle.write(line + "\n")
        if record.step % self.log_every == 0:
            logging.info(line)


class CheckpointObserver(TrainingObserver):
    """
    Saves a checkpoint every ``checkpoint_every`` completed steps.

    The trainer must expose ``config.checkpoint_every`` and ``save_checkpoint()``.
    """

    def __init__(self, trainer: Any):
        if not hasattr(trainer, 'config') or not hasattr(trainer, 'save_checkpoint'):
            raise TypeError("Trainer must have 'config' and 'save_checkpoint' attributes")
        self.trainer = trainer

    def update(self, record: StepRecord) -> None:
        if record is None:
            raise AttributeError("Step record cannot be None")
        every = self.trainer.config.checkpoint_every
        if every and (record.step + 1) % every == 0:
            self.trainer.save_checkpoint()
            logging.info(f"Checkpoint saved after step {record.step}")


class ValidationObserver(TrainingObserver):
    """
    Runs held-out validation every ``validate_every`` completed steps and appends the
    aggregate metrics to ``validation.jsonl`` in the trainer's output directory.

    The trainer must expose ``config.validate_every``, ``out_dir`` and ``validate()``.
    """

    def __init__(self, trainer: Any):
        if not all(hasattr(trainer, name) for name in ('config', 'validate', 'out_dir')):
            raise TypeError("Trainer must have 'config', 'out_dir' and 'validate' attributes")
        self.trainer = trainer
        self.reports = []

    def update(self, record: StepRecord) -> None:
        if record is None:
            raise AttributeError("Step record cannot be None")
        every = self.trainer.config.validate_every
        if not every or (record.step + 1) % every:
            return
        report = self.trainer.validate()
        if report is None:
            return
        self.reports.append(report)
        line = {"step": record.step, **report.aggregates_json()}
        with open(Path(self.trainer.out_dir) / "validation.jsonl", "a", encoding="utf-8") as handle:
            handle.write(json.dumps(line) + "\n")
        logging.info(f"Validation after step {record.step}: {report.aggregates()}")
