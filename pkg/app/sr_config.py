########################
# Framework Config     #
########################

import configparser
from dataclasses import dataclass, field, fields
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from dotenv import load_dotenv

from app.discriminator import DiscriminatorConfig
from app.exceptions import ConfigurationError
from app.feature_extractor import VGG16_WIDTHS
from app.generator import GeneratorConfig
from app.losses import AdversarialLossFactory, LossWeights
from app.qa_network import QAConfig

# Load environment variables from a .env file into the program's environment
load_dotenv()

OPTIMIZER_KINDS = ("adam",)
SCHEDULER_KINDS = ("constant", "step")

# Keys that change how long a run lasts or how it reports, not what it learns
RUN_LENGTH_KEYS = ("total_steps", "checkpoint_every", "validate_every", "log_every", "num_workers")


def get_project_root() -> Path:
    """
    Get the project root directory.

    Returns:
        Path: Two levels up from this file (app/sr_config.py -> project root).
    """
    return Path(__file__).parent.parent


class SRConfig:
    """
    Process-level settings: directories, device, worker count and external weight files.

    Constructor arguments win over ``TRIPLETSR_*`` environment variables, which win over
    defaults. A ``.env`` file in the working directory is loaded at import.
    """

    def __init__(
        self,
        base_dir: Optional[Path] = None,
        data_root: Optional[Path] = None,
        device: Optional[str] = None,
        num_workers: Optional[int] = None,
        lpips_calibration: Optional[Path] = None,
        vgg_weights: Optional[str] = None,
        default_encoding: Optional[str] = None,
    ):
        project_root = get_project_root()
        self.base_dir = Path(base_dir or os.getenv('TRIPLETSR_BASE_DIR', str(project_root))).resolve()

        # Default for --data-root; TRIPLETSR_DATA_ROOT is an alias
        data_root = data_root or os.getenv('SRTGAN_DATA_ROOT') or os.getenv('TRIPLETSR_DATA_ROOT')
        self.data_root = Path(data_root).resolve() if data_root else None

        self.device = device or os.getenv('TRIPLETSR_DEVICE', 'cpu')
        self.num_workers = num_workers if num_workers is not None else int(
            os.getenv('TRIPLETSR_NUM_WORKERS', '0')
        )

        calibration = lpips_calibration or os.getenv('TRIPLETSR_LPIPS_CALIBRATION')
        self.lpips_calibration = Path(calibration) if calibration else None

        self.vgg_weights = vgg_weights or os.getenv('TRIPLETSR_VGG_WEIGHTS', 'imagenet')
        self.default_encoding = default_encoding or os.getenv('TRIPLETSR_DEFAULT_ENCODING', 'utf-8')

    @property
    def log_dir(self) -> Path:
        return Path(os.getenv('TRIPLETSR_LOG_DIR', str(self.base_dir / "logs"))).resolve()

    @property
    def log_file(self) -> Path:
        return Path(os.getenv('TRIPLETSR_LOG_FILE', str(self.log_dir / "tripletsr.log"))).resolve()

    def validate(self) -> None:
        """
        Raises:
            ConfigurationError: If any setting is invalid.
        """
        if self.num_workers < 0:
            raise ConfigurationError("TRIPLETSR_NUM_WORKERS must be >= 0")
        if not (self.device == "cpu" or self.device.startswith("cuda")):
            raise ConfigurationError(f"TRIPLETSR_DEVICE must be 'cpu' or 'cuda[:n]', got '{self.device}'")


def setup_logging(config: SRConfig) -> Path:
    """
    Configure file logging for the process.

    Returns:
        Path: The log file in use.
    """
    try:
        os.makedirs(config.log_dir, exist_ok=True)
        log_file = config.log_file.resolve()
        log_file.parent.mkdir(parents=True, exist_ok=True)
        logging.basicConfig(
            filename=str(log_file),
            level=logging.INFO,
            format='%(asctime)s - %(levelname)s - %(message)s',
            force=True  # Overwrite any existing logging configuration
        )
        logging.info(f"Logging initialized at: {log_file}")
        return log_file
    except Exception as e:
        print(f"Error setting up logging: {e}")
        raise


########################
# Run Config           #
########################

@dataclass
class OptimizerConfig:
    """Adam settings for both networks plus an optional step schedule."""

    kind: str = "adam"
    lr_g: float = 1e-4
    lr_d: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    scheduler: str = "constant"
    step_size: int = 0
    gamma: float = 0.5

    def validate(self) -> None:
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigurationError(f"optimizer.kind must be one of {OPTIMIZER_KINDS}, got '{self.kind}'")
        if self.scheduler not in SCHEDULER_KINDS:
            raise ConfigurationError(
                f"optimizer.scheduler must be one of {SCHEDULER_KINDS}, got '{self.scheduler}'"
            )
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigurationError("optimizer.lr_g and optimizer.lr_d must be positive")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigurationError(f"optimizer.{name} must be in [0, 1)")
        if self.scheduler == "step" and self.step_size < 1:
            raise ConfigurationError("optimizer.step_size must be >= 1 for the step scheduler")


@dataclass
class PerceptualConfig:
    """Backbone of the perceptual loss: 'imagenet', 'random' or a state-dict path, and stage widths."""

    weights: str = "imagenet"
    widths: List[int] = field(default_factory=lambda: list(VGG16_WIDTHS))


@dataclass
class TrainConfig:
    """
    Every hyperparameter of an SR training run.

    Read from an INI run config with sections [training] [optimizer] [loss] [generator]
    [discriminator] [qa] [perceptual] [paths]. ``fingerprint()`` identifies the learning
    setup so a resume can refuse a checkpoint made under different settings.
    """

    batch_size: int = 4
    crop_size: int = 48
    total_steps: int = 100000
    d_steps: int = 1
    seed: int = 0
    checkpoint_every: int = 1000
    validate_every: int = 0
    log_every: int = 1
    num_workers: int = 0
    augment: bool = True

    adversarial: str = "triplet"
    use_qa: bool = True
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    discriminator: DiscriminatorConfig = field(default_factory=DiscriminatorConfig)
    qa: QAConfig = field(default_factory=QAConfig)
    perceptual: PerceptualConfig = field(default_factory=PerceptualConfig)

    qa_weights: Optional[str] = None
    train_index: str = "train.txt"
    val_index: str = "val.txt"

    TRAINING_KEYS = ("batch_size", "crop_size", "total_steps", "d_steps", "seed", "checkpoint_every",
                     "validate_every", "log_every", "num_workers", "augment")
    LOSS_KEYS = ("adversarial", "use_qa")
    PATH_KEYS = ("qa_weights", "train_index", "val_index")
    NESTED = ("optimizer", "generator", "discriminator", "qa", "perceptual")

    def validate(self) -> None:
        """
        Raises:
            ConfigurationError: Naming the first invalid key.
        """
        for name in ("batch_size", "crop_size", "total_steps", "d_steps", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"training.{name} must be >= 1, got {getattr(self, name)}")
        for name in ("checkpoint_every", "validate_every", "num_workers"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"training.{name} must be >= 0, got {getattr(self, name)}")
        if self.adversarial not in AdversarialLossFactory.list_losses():
            raise ConfigurationError(
                f"loss.adversarial must be one of {AdversarialLossFactory.list_losses()}, got '{self.adversarial}'"
            )
        self.loss.validate()
        self.optimizer.validate()
        self.generator.validate()
        self.discriminator.validate()
        self.qa.validate()
        if len(self.perceptual.widths) != len(VGG16_WIDTHS):
            raise ConfigurationError(f"perceptual.widths needs {len(VGG16_WIDTHS)} entries")

    def _targets(self) -> Dict[str, Dict[str, Any]]:
        """Map section -> key -> owning object."""
        targets: Dict[str, Dict[str, Any]] = {
            "training": {k: self for k in self.TRAINING_KEYS},
            "loss": {**{f.name: self.loss for f in fields(self.loss)}, **{k: self for k in self.LOSS_KEYS}},
            "paths": {k: self for k in self.PATH_KEYS},
        }
        for section in self.NESTED:
            owner = getattr(self, section)
            targets[section] = {f.name: owner for f in fields(owner)}
        return targets

    def set(self, section: str, key: str, raw: Any) -> None:
        """
        Set one value, coercing strings to the type of the current value.

        Raises:
            ConfigurationError: For an unknown section or key, or an unparsable value.
        """
        targets = self._targets()
        if section not in targets:
            raise ConfigurationError(f"Unknown config section [{section}]")
        if key not in targets[section]:
            raise ConfigurationError(f"Unknown config key '{section}.{key}'")
        owner = targets[section][key]
        try:
            value = _coerce(getattr(owner, key), raw)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"Invalid value for '{section}.{key}': {raw!r}") from e
        setattr(owner, key, value)

    def snapshot(self) -> Dict[str, Dict[str, Any]]:
        """Plain nested dict of every section and key."""
        out: Dict[str, Dict[str, Any]] = {}
        for section, keys in self._targets().items():
            out[section] = {}
            for key, owner in keys.items():
                value = getattr(owner, key)
                out[section][key] = list(value) if isinstance(value, tuple) else value
        return out

    def fingerprint(self) -> str:
        """SHA-256 over the snapshot without the run-length keys."""
        snapshot = self.snapshot()
        for key in RUN_LENGTH_KEYS:
            snapshot["training"].pop(key, None)
        return hashlib.sha256(json.dumps(snapshot, sort_keys=True).encode("utf-8")).hexdigest()

    @classmethod
    def from_snapshot(cls, snapshot: Dict[str, Dict[str, Any]]) -> "TrainConfig":
        config = cls()
        for section, values in snapshot.items():
            for key, value in values.items():
                config.set(section, key, value)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None,
                  encoding: str = "utf-8") -> "TrainConfig":
        """
        Read a run config file and apply ``{"section.key": value}`` overrides on top.

        Raises:
            ConfigurationError: If the file is missing, unparsable or names an unknown key.
        """
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"Config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path, encoding=encoding)
        except configparser.Error as e:
            raise ConfigurationError(f"Could not parse config {path}: {e}") from e
        config = cls()
        for section in parser.sections():
            for key, value in parser.items(section):
                config.set(section, key, value)
        for dotted, value in (overrides or {}).items():
            section, _, key = dotted.partition(".")
            config.set(section, key, value)
        config.validate()
        logging.info(f"Loaded run config {path} (fingerprint {config.fingerprint()[:12]})")
        return config

    def to_file(self, path: Union[str, Path], encoding: str = "utf-8") -> Path:
        """Write the config in the INI format ``from_file`` reads."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        parser = configparser.ConfigParser(interpolation=None)
        for section, values in self.snapshot().items():
            parser[section] = {key: _format(value) for key, value in values.items()}
        with open(path, "w", encoding=encoding) as handle:
            parser.write(handle)
        return path


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(current: Any, raw: Any) -> Any:
    if not isinstance(raw, str):
        if isinstance(current, tuple):
            return tuple(raw)
        if isinstance(current, float) and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        return list(raw) if isinstance(current, list) else raw
    text = raw.strip()
    if isinstance(current, bool):
        lowered = text.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, list):
        return [int(v) for v in text.split(",") if v.strip()]
    if isinstance(current, tuple):
        return tuple(float(v) for v in text.split(",") if v.strip())
    if current is None and text.lower() in ("", "none"):
        return None
    return text
