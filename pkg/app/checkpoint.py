########################
# Training Checkpoint  #
########################

from dataclasses import dataclass, field
import datetime
import hashlib
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import torch

from app.exceptions import CheckpointError

CHECKPOINT_FORMAT = "tripletsr-checkpoint"
CHECKPOINT_VERSION = 1
DISCRIMINATOR_PREFIX = "disc."


def state_dict_hash(state: Mapping[str, torch.Tensor]) -> str:
    """SHA-256 over names, dtypes, shapes and raw bytes of every tensor, in key order."""
    digest = hashlib.sha256()
    for name in sorted(state):
        tensor = state[name].detach().cpu().contiguous().reshape(-1)
        digest.update(f"{name}|{tensor.dtype}|{tuple(state[name].shape)}|".encode("utf-8"))
        digest.update(tensor.view(torch.uint8).numpy().tobytes() if tensor.numel() else b"")
    return digest.hexdigest()


def _clone_state(state: Mapping[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    return {name: tensor.detach().cpu().clone() for name, tensor in state.items()}


@dataclass
class Checkpoint:
    """
    Snapshot of a training run: both networks, optimizer states, rng state and config.

    Generator keys follow the generator's naming contract (llie.*, hlie.*, rec.*);
    discriminator keys are stored under the ``disc.`` prefix. Every array is listed in a
    ``(name, dtype, shape)`` record that is verified on load.
    """

    step: int
    generator: Dict[str, torch.Tensor]
    discriminator: Dict[str, torch.Tensor]
    optimizer_g: Dict[str, Any] = field(default_factory=dict)
    optimizer_d: Dict[str, Any] = field(default_factory=dict)
    scheduler_g: Dict[str, Any] = field(default_factory=dict)
    scheduler_d: Dict[str, Any] = field(default_factory=dict)
    rng_state: Optional[torch.Tensor] = None
    config: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    fingerprint: str = ""
    history: List[Dict[str, Any]] = field(default_factory=list)
    timestamp: datetime.datetime = field(default_factory=datetime.datetime.now)

    def arrays(self) -> Dict[str, torch.Tensor]:
        """All network tensors under their checkpoint names."""
        arrays = dict(self.generator)
        arrays.update({DISCRIMINATOR_PREFIX + name: t for name, t in self.discriminator.items()})
        return arrays

    def records(self) -> List[List[Any]]:
        return [[name, str(t.dtype), list(t.shape)] for name, t in self.arrays().items()]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": CHECKPOINT_FORMAT,
            "format_version": CHECKPOINT_VERSION,
            "step": self.step,
            "records": self.records(),
            "arrays": _clone_state(self.arrays()),
            "optimizer_g": self.optimizer_g,
            "optimizer_d": self.optimizer_d,
            "scheduler_g": self.scheduler_g,
            "scheduler_d": self.scheduler_d,
            "rng_state": self.rng_state,
            "config": self.config,
            "fingerprint": self.fingerprint,
            "history": self.history,
            "timestamp": self.timestamp.isoformat(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Checkpoint":
        """
        Raises:
            CheckpointError: On a foreign format, a version mismatch or records that do
                not match the stored arrays.
        """
        if not isinstance(data, dict) or data.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError("Not a checkpoint file (format header missing)")
        version = data.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"Checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
        try:
            arrays = data["arrays"]
            records = data["records"]
            if sorted(name for name, _, _ in records) != sorted(arrays):
                raise CheckpointError("Checkpoint records do not list the stored arrays")
            for name, dtype, shape in records:
                tensor = arrays[name]
                if str(tensor.dtype) != dtype or list(tensor.shape) != list(shape):
                    raise CheckpointError(
                        f"Array '{name}' is {tensor.dtype}{list(tensor.shape)}, record says {dtype}{list(shape)}"
                    )
            return cls(
                step=int(data["step"]),
                generator={n: t for n, t in arrays.items() if not n.startswith(DISCRIMINATOR_PREFIX)},
                discriminator={
                    n[len(DISCRIMINATOR_PREFIX):]: t for n, t in arrays.items() if n.startswith(DISCRIMINATOR_PREFIX)
                },
                optimizer_g=data["optimizer_g"],
                optimizer_d=data["optimizer_d"],
                scheduler_g=data.get("scheduler_g", {}),
                scheduler_d=data.get("scheduler_d", {}),
                rng_state=data["rng_state"],
                config=data["config"],
                fingerprint=data["fingerprint"],
                history=list(data.get("history", [])),
                timestamp=datetime.datetime.fromisoformat(data["timestamp"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise CheckpointError(f"Checkpoint is corrupt: {e}") from e

    def save(self, path: Union[str, Path]) -> Path:
        """
        Write the checkpoint atomically (temporary file, then rename).

        Raises:
            CheckpointError: If the path is not writable.
        """
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save(self.to_dict(), tmp)
            os.replace(tmp, path)
        except (OSError, RuntimeError) as e:
            raise CheckpointError(f"Cannot write checkpoint {path}: {e}") from e
        logging.info(f"Checkpoint at step {self.step} saved to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        """
        Raises:
            CheckpointError: If the file is missing, unreadable or fails verification.
        """
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"Checkpoint not found: {path}")
        try:
            data = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as e:
            raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
        try:
            checkpoint = cls.from_dict(data)
        except CheckpointError as e:
            raise CheckpointError(f"{path}: {e}") from e
        logging.info(f"Loaded checkpoint {path} at step {checkpoint.step}")
        return checkpoint
