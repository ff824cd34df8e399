"""Configuration module for the hard attention laboratory."""
import hashlib
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from dotenv import dotenv_values, load_dotenv

# Load environment variables
load_dotenv()


class ConfigError(ValueError):
    """Invalid or unknown configuration value."""


# Helper function to get config values from environment variables
def get_config(key: str, default: str = None) -> str:
    """Get configuration value from environment variables."""
    return os.getenv(key, default)


# Base paths
BASE_DIR = Path(__file__).parent
DATA_DIR = Path(get_config("RAM_DATA_ROOT", str(BASE_DIR / "data")))
RUNS_DIR = Path(get_config("RAM_RUNS_DIR", str(BASE_DIR / "runs")))

LOG_LEVEL = get_config("LOG_LEVEL", "INFO")
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# Dataset geometry
DATASETS = {
    "mnist": {"image_size": 28, "num_classes": 10},
    "fashion_mnist": {"image_size": 28, "num_classes": 10},
    "fer2013": {"image_size": 48, "num_classes": 7},
}

VARIANTS = ("RAM", "DRAM", "MRAM", "LENET")
BASELINE_MODES = ("single", "hybrid")

# Metric/trace file names inside a run directory
METRICS_FILE = "metrics.csv"
TIMINGS_FILE = "timings.csv"
TRACE_FILE = "traces.jsonl"
CONFIG_SNAPSHOT_FILE = "config.env"
BEST_CHECKPOINT = "best.npz"
LAST_CHECKPOINT = "last.npz"
RESULTS_FILE = "results.json"


def _parse_bool(value: str) -> bool:
    lowered = str(value).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"Cannot interpret {value!r} as a boolean")


@dataclass
class RunConfig:
    """Every knob of a run, defaulting to the experimental protocol.

    The on-disk form is a flat ``key=value`` file; keys are the field names.
    """

    # dataset
    dataset: str = "mnist"
    data_root: str = str(DATA_DIR)
    output_dir: str = str(RUNS_DIR)
    train_limit: int = 0
    test_limit: int = 0

    # model
    variant: str = "MRAM"
    hidden: int = 256
    glimpse_hidden: int = 128
    loc_hidden: int = 128
    num_glimpses: int = 10
    patch_size: int = 8
    num_scales: int = 1
    scale_factor: int = 2
    baseline_mode: str = "hybrid"
    baseline_hidden: int = 64
    context_cnn: bool = False
    policy_sigma: float = 0.1

    # training
    alpha: float = 0.01
    batch_size: int = 128
    max_epochs: int = 300
    patience: int = 50
    lr: float = 3e-4
    lr_decay_factor: float = 0.5
    lr_decay_patience: int = 20
    min_lr: float = 1e-5
    clip_norm: float = 5.0
    seed: int = 1
    val_fraction: float = 0.1

    # flags
    emit_traces: bool = False
    trace_images: int = 100

    def validate(self) -> "RunConfig":
        """Check value ranges and cross-field constraints.

        Returns:
            self, to allow chaining

        Raises:
            ConfigError: when a value is out of range
        """
        if self.dataset not in DATASETS:
            raise ConfigError(f"Unknown dataset {self.dataset!r}; expected one of {sorted(DATASETS)}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"Unknown variant {self.variant!r}; expected one of {list(VARIANTS)}")
        if self.baseline_mode not in BASELINE_MODES:
            raise ConfigError(f"Unknown baseline_mode {self.baseline_mode!r}")
        if self.baseline_mode == "hybrid" and self.variant == "RAM":
            raise ConfigError("hybrid baseline requires a two-layer variant (DRAM or MRAM)")
        if self.context_cnn and self.variant != "DRAM":
            raise ConfigError("context_cnn is only available for DRAM")
        if self.num_glimpses < 1:
            raise ConfigError("num_glimpses must be >= 1")
        if self.patch_size < 2 or self.patch_size % 2:
            raise ConfigError("patch_size must be even and >= 2")
        if self.num_scales < 1 or self.scale_factor < 2:
            raise ConfigError("num_scales must be >= 1 and scale_factor >= 2")
        if self.policy_sigma <= 0:
            raise ConfigError("policy_sigma must be positive")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0 < self.patience < self.max_epochs:
            raise ConfigError("patience must be positive and smaller than max_epochs")
        if self.lr <= 0 or not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr must be positive and lr_decay_factor in (0, 1]")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must be in (0, 1)")
        return self

    @property
    def image_size(self) -> int:
        return DATASETS[self.dataset]["image_size"]

    @property
    def num_classes(self) -> int:
        return DATASETS[self.dataset]["num_classes"]

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        """Return a copy with ``overrides`` applied (string values are coerced).

        Raises:
            ConfigError: on unknown keys or uncoercible values
        """
        values = asdict(self)
        types = {f.name: f.type for f in fields(self)}
        for key, raw in overrides.items():
            if key not in types:
                raise ConfigError(f"Unknown config key {key!r}")
            values[key] = _coerce(key, raw, types[key])
        return RunConfig(**values)

    @classmethod
    def from_file(cls, path: Path, overrides: Optional[Dict[str, Any]] = None) -> "RunConfig":
        """Load a flat key=value file, then apply CLI overrides."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        values = {k: v for k, v in dotenv_values(path).items() if v is not None}
        config = cls().with_overrides(values)
        if overrides:
            config = config.with_overrides(overrides)
        return config

    def to_text(self) -> str:
        """Serialise to the flat key=value format (stable key order)."""
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path

    def config_hash(self) -> str:
        """Hash of the fields that influence results (paths excluded)."""
        values = asdict(self)
        for key in ("data_root", "output_dir"):
            values.pop(key)
        key_string = "|".join(f"{k}={values[k]}" for k in sorted(values))
        return hashlib.sha256(key_string.encode()).hexdigest()[:12]


def _coerce(key: str, raw: Any, type_name: Any) -> Any:
    type_name = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if type_name == "bool":
            return raw if isinstance(raw, bool) else _parse_bool(raw)
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        value = str(raw)
        return value.upper() if key == "variant" else value
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid value for {key}: {raw!r} ({e})") from e


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    """Parse ``key=value`` strings from the command line."""
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"Override {pair!r} is not of the form key=value")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides
