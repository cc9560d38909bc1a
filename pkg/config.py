import os
from dataclasses import asdict, dataclass, fields

from dotenv import dotenv_values, load_dotenv

from modules.sampler import STRATEGIES
from utils.errors import ConfigError

# Load environment variables
load_dotenv()

# Application Settings
DEFAULT_SEED = int(os.getenv("FLOW_ENGINE_SEED", "0"))
DEFAULT_WORKERS = int(os.getenv("FLOW_ENGINE_WORKERS", "1"))
LOG_DIR = os.getenv("LOG_DIR", "logs")
OUTPUT_DIR = os.getenv("OUTPUT_DIR", "output")

# Optional displacement bounds; "none" in a config file means unbounded
OPTIONAL_KEYS = ("train_min_disp", "train_max_disp")


@dataclass
class RunConfig:
    # Training
    strategy: str = "baseline"
    epochs: int = 100
    triplets_per_epoch: int = 5000
    batch_size: int = 100
    patch_size: int = 31
    descriptor_dim: int = 64
    margin: float = 100.0
    lam: float = 0.8
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_halving_epochs: int = 100
    lognormal_mu: float = 0.0
    lognormal_sigma: float = 1.0
    train_min_disp: float = None
    train_max_disp: float = None
    checkpoint_every: int = 0
    validation_fraction: float = 0.1

    # Matching
    pm_range: int = 24
    pm_iterations: int = 6
    pm_decay: float = 0.5
    tau: float = 1.0
    densify_k: int = 16
    sigma_s: float = 15.0
    sigma_c: float = 0.08

    # Evaluation
    distractor_radius: float = 25.0
    sensitivity_offset: int = 5
    outlier_threshold: float = 3.0

    # Digit benchmark
    mnist_a_max: float = 0.8
    mnist_epochs: int = 15
    mnist_train_size: int = 5000
    mnist_lr: float = 0.05
    mnist_batch_size: int = 50
    mnist_channels: int = 8

    # Run
    seed: int = DEFAULT_SEED
    workers: int = DEFAULT_WORKERS

    def to_dict(self):
        return asdict(self)

    def validate(self):
        """Check every value against the precondition of the module that consumes it"""
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy: '{self.strategy}' is not one of {', '.join(STRATEGIES)}")
        for key in ("epochs", "triplets_per_epoch", "descriptor_dim", "pm_range", "pm_iterations",
                    "densify_k", "mnist_epochs", "mnist_train_size", "mnist_batch_size", "mnist_channels",
                    "workers", "sensitivity_offset"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be at least 1, got {getattr(self, key)}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size: must be at least 2, got {self.batch_size}")
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch_size: must be an odd number >= 3, got {self.patch_size}")
        for key in ("margin", "learning_rate", "lognormal_sigma", "tau", "sigma_s", "sigma_c",
                    "mnist_lr", "outlier_threshold"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key}: must be positive, got {getattr(self, key)}")
        if self.distractor_radius < 1:
            raise ConfigError(f"distractor_radius: must be at least 1, got {self.distractor_radius}")
        for key in ("lam", "momentum", "mnist_a_max"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"{key}: must be within [0,1], got {getattr(self, key)}")
        if not 0.0 < self.pm_decay < 1.0:
            raise ConfigError(f"pm_decay: must be within (0,1), got {self.pm_decay}")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError(f"validation_fraction: must be within (0,1), got {self.validation_fraction}")
        if self.seed < 0:
            raise ConfigError(f"seed: must be non-negative, got {self.seed}")
        if self.lr_halving_epochs < 0 or self.checkpoint_every < 0:
            raise ConfigError("lr_halving_epochs and checkpoint_every must be non-negative")
        if self.train_min_disp is not None and self.train_max_disp is not None \
                and self.train_min_disp >= self.train_max_disp:
            raise ConfigError(
                f"train_min_disp: {self.train_min_disp} must be below train_max_disp {self.train_max_disp}"
            )
        return self


DEFAULTS = RunConfig().to_dict()

_TYPES = {f.name: type(DEFAULTS[f.name]) for f in fields(RunConfig) if f.name not in OPTIONAL_KEYS}


def coerce_value(key, raw):
    """Convert a text (or CLI) value to the type of the key's default"""
    if key not in DEFAULTS:
        raise ConfigError(f"{key}: unknown configuration key")
    if raw is None:
        return None if key in OPTIONAL_KEYS else DEFAULTS[key]
    if key in OPTIONAL_KEYS:
        if isinstance(raw, str) and raw.strip().lower() in ("", "none"):
            return None
        target = float
    else:
        target = _TYPES[key]
    try:
        if target is int and isinstance(raw, str):
            return int(raw.strip())
        return target(raw.strip()) if isinstance(raw, str) else target(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read '{raw}' as {target.__name__}")


def load_run_config(path=None, overrides=None):
    """
    Resolve the run configuration: defaults, then a key=value file, then overrides

    Args:
        path (str): Optional plain-text key=value file
        overrides (dict): Values from command-line flags (None entries are ignored)

    Returns:
        RunConfig: Validated configuration
    """
    values = dict(DEFAULTS)
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config: file {path} does not exist")
        for key, raw in dotenv_values(path).items():
            values[key.strip().lower()] = coerce_value(key.strip().lower(), raw)
    for key, raw in (overrides or {}).items():
        if raw is not None:
            values[key] = coerce_value(key, raw)
    return RunConfig(**values).validate()


def dump_config(config=None):
    """Every setting as key=value lines, in field order"""
    values = (config or RunConfig()).to_dict()
    return "\n".join(f"{key}={'none' if value is None else value}" for key, value in values.items())
