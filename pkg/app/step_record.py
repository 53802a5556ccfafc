########################
# Step Record Model    #
########################

from dataclasses import dataclass, field
import datetime
import math
from typing import Any, Dict

from app.exceptions import TrainingError

COMPONENTS = ("content", "qa", "gan_g", "gan_d", "perceptual", "loss_g", "loss_d")


@dataclass
class StepRecord:
    """
    Value object holding the loss values of one training step.

    ``gan_g`` and ``gan_d`` come from different discriminator states within a step, so
    their sum is only 2 when both are recomputed against one fixed discriminator.
    A term skipped because its weight is zero is recorded as 0.0.
    """

    step: int
    content: float
    qa: float
    gan_g: float
    gan_d: float
    perceptual: float
    loss_g: float
    loss_d: float
    timestamp: datetime.datetime = field(default_factory=datetime.datetime.now)

    def __post_init__(self):
        for name in COMPONENTS:
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise TrainingError(
                    f"Loss term '{name}' is not finite at step {self.step}", term=name, step=self.step
                )
            setattr(self, name, value)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"step": self.step}
        data.update({name: getattr(self, name) for name in COMPONENTS})
        data["timestamp"] = self.timestamp.isoformat()
        return data

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "StepRecord":
        """
        Raises:
            TrainingError: If a field is missing or not a number.
        """
        try:
            record = StepRecord(step=int(data["step"]), **{name: float(data[name]) for name in COMPONENTS})
            if "timestamp" in data:
                record.timestamp = datetime.datetime.fromisoformat(str(data["timestamp"]))
            return record
        except (KeyError, ValueError) as e:
            raise TrainingError(f"Invalid step record data: {e}")

    def to_log_line(self) -> str:
        """Machine-parseable ``key=value`` line for the training log."""
        values = " ".join(f"{name}={getattr(self, name):.8g}" for name in COMPONENTS)
        return f"step={self.step} {values}"

    def same_losses(self, other: "StepRecord") -> bool:
        """True when every loss value matches exactly (timestamps ignored)."""
        return self.step == other.step and all(
            getattr(self, name) == getattr(other, name) for name in COMPONENTS
        )

    def __str__(self) -> str:
        return f"Step {self.step}: loss_g={self.loss_g:.6f} loss_d={self.loss_d:.6f}"
