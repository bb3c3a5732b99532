import dataclasses
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from deep_prior_nas.errors import ConfigError

DATA_ROOT_ENV = "DPNAS_DATA_ROOT"
DEFAULT_CONFIG_PATH = Path("config.yml")


@dataclass
class DatasetConfig:
    name: str = "fashion-mnist"
    root: str = ""
    val_fraction: float = 0.1
    seed: int = 0

    def resolved_root(self) -> Path:
        """Dataset root, falling back to $DPNAS_DATA_ROOT and then ./data."""
        if self.root:
            return Path(self.root)
        return Path(os.environ.get(DATA_ROOT_ENV) or "data")


@dataclass
class PriorConfig:
    embed_batch_size: int = 256
    flat_cap: int = 262144
    cache_dir: str | None = None
    memory_budget_mb: int = 2048


@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0 or self.learning_rate <= 0:
            raise ConfigError(
                "classifier epochs, batch_size and learning_rate must be positive"
            )


@dataclass
class AgentConfig:
    alpha: float = 0.1
    gamma: float = 1.0
    q_init: float = 0.5
    replay_batch: int = 64
    max_convs: int = 12
    # Upper edges of the spatial buckets; the last bucket is open-ended.
    bucket_edges: list[int] = field(default_factory=lambda: [3, 7, 14])


@dataclass
class SearchConfig:
    total_architectures: int = 2500
    explore_len: int = 1500
    decay_every: int = 100
    decay_step: float = 0.1
    seed: int = 0
    classes: list[int] | None = None
    workers: int = 1
    rolling_window: int = 50
    checkpoint_every: int = 1
    max_resample: int = 1000

    def __post_init__(self) -> None:
        if self.total_architectures <= 0:
            raise ConfigError("search.total_architectures must be positive")
        if not 0 <= self.explore_len <= self.total_architectures:
            raise ConfigError(
                "search.explore_len must lie in [0, total_architectures]"
            )
        if self.decay_every <= 0 or self.workers <= 0 or self.rolling_window <= 0:
            raise ConfigError(
                "search.decay_every, workers and rolling_window must be positive"
            )


@dataclass
class ContinualConfig:
    mode: str = "single-head"
    increments: str = "0,1;2,3;4,5;6,7;8,9"
    # "total" keeps at most core_size entries overall, "per-task" adds
    # core_size entries per finished task.
    core_policy: str = "total"
    core_size: int = 40
    seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("multi-head", "single-head", "accumulate"):
            raise ConfigError(f"Unknown continual mode: {self.mode}")
        if self.core_policy not in ("total", "per-task"):
            raise ConfigError(f"Unknown core policy: {self.core_policy}")


@dataclass
class MetricsConfig:
    enabled: bool = False
    port: int = 8000
    namespace: str = "dpnas"


@dataclass
class LoggingConfig:
    level: str = "INFO"
    format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


@dataclass
class OutputConfig:
    directory: str = "runs/latest"


@dataclass
class AppConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    classifier: TrainConfig = field(default_factory=TrainConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    continual: ContinualConfig = field(default_factory=ContinualConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


_SECTIONS: dict[str, type[Any]] = {
    "dataset": DatasetConfig,
    "prior": PriorConfig,
    "classifier": TrainConfig,
    "agent": AgentConfig,
    "search": SearchConfig,
    "continual": ContinualConfig,
    "metrics": MetricsConfig,
    "logging": LoggingConfig,
    "output": OutputConfig,
}

PRESETS: dict[str, dict[str, int]] = {
    "full": {"total_architectures": 2500, "explore_len": 1500, "decay_every": 100},
    # Same phase proportions (60% exploration, ten decrements) at ~1/8 scale.
    "desk": {"total_architectures": 300, "explore_len": 180, "decay_every": 12},
}


def _build_section(name: str, data: Any) -> Any:
    section_type = _SECTIONS[name]
    if data is None:
        return section_type()
    if not isinstance(data, dict):
        raise ConfigError(f"Config section '{name}' must be a mapping")
    try:
        return section_type(**data)
    except TypeError as e:
        raise ConfigError(f"Invalid '{name}' section: {e}") from e


def config_from_dict(config_data: dict[str, Any] | None) -> AppConfig:
    """Build an AppConfig from parsed YAML, filling in embedded defaults."""
    config_data = config_data or {}
    unknown = set(config_data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"Unknown config sections: {', '.join(sorted(unknown))}")
    return AppConfig(
        **{name: _build_section(name, config_data.get(name)) for name in _SECTIONS}
    )


def load_config(config_path: Path | None = None) -> AppConfig:
    """Load configuration from YAML file.

    Without an explicit path, ``config.yml`` in the working directory is used
    when present and the embedded defaults otherwise.
    """
    if config_path is None:
        if not DEFAULT_CONFIG_PATH.exists():
            return AppConfig()
        config_path = DEFAULT_CONFIG_PATH

    if not config_path.exists():
        raise FileNotFoundError(f"Config file not found: {config_path}")

    with open(config_path) as f:
        config_data = yaml.safe_load(f)

    return config_from_dict(config_data)


def dump_config(config: AppConfig) -> str:
    return yaml.safe_dump(asdict(config), sort_keys=False)


def apply_preset(config: AppConfig, preset: str) -> AppConfig:
    if preset not in PRESETS:
        raise ConfigError(f"Unknown preset: {preset}")
    search = dataclasses.replace(config.search, **PRESETS[preset])
    return dataclasses.replace(config, search=search)


def apply_seed(config: AppConfig, seed: int) -> AppConfig:
    """Override every seed in the config with one global seed."""
    return dataclasses.replace(
        config,
        dataset=dataclasses.replace(config.dataset, seed=seed),
        classifier=dataclasses.replace(config.classifier, seed=seed),
        search=dataclasses.replace(config.search, seed=seed),
        continual=dataclasses.replace(config.continual, seed=seed),
    )
