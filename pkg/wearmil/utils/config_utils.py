import dataclasses
import json
import os
from dataclasses import dataclass, field

from dotenv import load_dotenv

from ..errors import ConfigurationError
from ..mil_model import TrainConfig

# --- Defaults ---
DEFAULT_SEED = 0
DEFAULT_JOBS = 1
DEFAULT_ECG_FS = 130.0
DEFAULT_QUALITY_THRESHOLD = 0.4
DEFAULT_MAX_INSTANCES = 512
DEFAULT_ACTIVITY_FEATURES = (
    "steps",
    "active_minutes",
    "sedentary_minutes",
    "floors",
    "calories",
)
SLEEP_FEATURES = ("sleep_s", "unmeasurable_s", "deep_s", "light_s", "rem_s")

ENV_SEED = "WEARMIL_SEED"
ENV_JOBS = "WEARMIL_JOBS"
ENV_CONFIG = "WEARMIL_CONFIG"


@dataclass
class SimulateConfig:
    n_patients: int = 40
    weeks: int = 26
    noise_sd: float = 3.0
    adherence_min: float = 0.6
    adherence_max: float = 1.0
    ecg_minutes: float = 30.0
    ecg_interval_days: int = 14
    m3_day: int = 91
    m6_day: int = 182
    start_date: str = "2024-01-08"


@dataclass
class EcgConfig:
    fs: float = DEFAULT_ECG_FS
    window_s: float = 300.0
    quality_threshold: float = DEFAULT_QUALITY_THRESHOLD
    stft_nperseg: int = 256
    stft_hop: int = 128
    stft_fmax: float = 40.0
    cwt_center: float = 6.0
    cwt_scales: int = 64
    cwt_fmin: float = 0.5
    cwt_fmax: float = 40.0
    poincare_min_ms: float = 300.0
    poincare_max_ms: float = 1500.0
    write_png: bool = False


@dataclass
class WatchConfig:
    activity_features: list = field(default_factory=lambda: list(DEFAULT_ACTIVITY_FEATURES))
    missing_unit: str = "cell"
    max_missing_fraction: float = 0.6
    week_anchor: str = "start"
    write_png: bool = False


@dataclass
class EncoderConfig:
    dim: int = 96
    pool: int = 4


@dataclass
class BagsConfig:
    max_instances: int = DEFAULT_MAX_INSTANCES
    cap_policy: str = "uniform"


@dataclass
class RunConfig:
    """Every stage parameter of a run, serialized as one JSON document."""
    seed: int = DEFAULT_SEED
    jobs: int = DEFAULT_JOBS
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    ecg: EcgConfig = field(default_factory=EcgConfig)
    watch: WatchConfig = field(default_factory=WatchConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    bags: BagsConfig = field(default_factory=BagsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _apply(target, values, path="config"):
    """Recursively copies `values` onto the dataclass `target`, rejecting unknown keys."""
    if not isinstance(values, dict):
        raise ConfigurationError(f"{path}: expected an object, got {type(values).__name__}")
    known = {f.name: f for f in dataclasses.fields(target)}
    for key, value in values.items():
        if key not in known:
            raise ConfigurationError(f"{path}: unknown key '{key}'")
        current = getattr(target, key)
        if dataclasses.is_dataclass(current):
            _apply(current, value, f"{path}.{key}")
        else:
            setattr(target, key, _coerce(current, value, f"{path}.{key}"))


def _coerce(current, value, path):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(value, bool):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigurationError(f"{path}: expected a list, got {value!r}")
        return list(value)
    if isinstance(current, str) and not isinstance(value, str):
        raise ConfigurationError(f"{path}: expected a string, got {value!r}")
    return value


def validate_config(config):
    """Checks cross-field constraints; raises ConfigurationError on the first violation."""
    if config.watch.missing_unit not in ("cell", "day"):
        raise ConfigurationError(f"watch.missing_unit must be 'cell' or 'day', got '{config.watch.missing_unit}'")
    if config.watch.week_anchor not in ("start", "end"):
        raise ConfigurationError(f"watch.week_anchor must be 'start' or 'end', got '{config.watch.week_anchor}'")
    if not 0.0 <= config.watch.max_missing_fraction <= 1.0:
        raise ConfigurationError("watch.max_missing_fraction must lie in [0, 1]")
    if not config.watch.activity_features:
        raise ConfigurationError("watch.activity_features must name at least one feature")
    if config.bags.cap_policy not in ("uniform", "latest"):
        raise ConfigurationError(f"bags.cap_policy must be 'uniform' or 'latest', got '{config.bags.cap_policy}'")
    if config.bags.max_instances < 1:
        raise ConfigurationError("bags.max_instances must be >= 1")
    if config.ecg.fs <= 0 or config.ecg.window_s <= 0:
        raise ConfigurationError("ecg.fs and ecg.window_s must be positive")
    if not 0.0 <= config.ecg.quality_threshold <= 1.0:
        raise ConfigurationError("ecg.quality_threshold must lie in [0, 1]")
    if not 0 < config.ecg.cwt_fmin < config.ecg.cwt_fmax < config.ecg.fs / 2:
        raise ConfigurationError("ecg.cwt_fmin/cwt_fmax must satisfy 0 < fmin < fmax < fs/2")
    if config.ecg.stft_hop <= 0 or config.ecg.stft_hop > config.ecg.stft_nperseg:
        raise ConfigurationError("ecg.stft_hop must lie in (0, stft_nperseg]")
    if config.jobs < 1:
        raise ConfigurationError("jobs must be >= 1")
    try:
        config.train.validate()
    except ValueError as e:
        raise ConfigurationError(f"train: {e}") from e
    return config


def load_run_config(config_path=None, overrides=None, use_env=True):
    """
    Resolves the run configuration.

    Precedence, lowest first: built-in defaults, environment variables
    (read from a .env file when present), the JSON config file, `overrides`
    (command-line flags).

    Args:
        config_path (str): Optional path to a JSON config file. Falls back to
            $WEARMIL_CONFIG when None and use_env is set.
        overrides (dict): Nested dict of values taking precedence over the file.
        use_env (bool): Whether to consult the environment.

    Returns:
        RunConfig: The fully resolved, validated config.
    """
    config = RunConfig()

    # Environment, including a .env file in the working directory
    if use_env:
        load_dotenv()
        env_values = {}
        if os.getenv(ENV_SEED):
            env_values["seed"] = _parse_env_int(ENV_SEED)
        if os.getenv(ENV_JOBS):
            env_values["jobs"] = _parse_env_int(ENV_JOBS)
        _apply(config, env_values)
        if config_path is None:
            config_path = os.getenv(ENV_CONFIG) or None

    # JSON config file
    if config_path:
        if not os.path.isfile(config_path):
            raise ConfigurationError(f"config file not found: {config_path}")
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                file_values = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"invalid JSON in {config_path}: {e}") from e
        _apply(config, file_values)

    # Command-line flags win
    if overrides:
        _apply(config, overrides)
    return validate_config(config)


def _parse_env_int(name):
    raw = os.getenv(name)
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigurationError(f"${name} must be an integer, got '{raw}'") from e


def write_provenance(out_dir, config, stage, argv=None, extra=None):
    """Writes run.json (resolved config + stage + argv) into out_dir and returns its path."""
    from .. import __version__

    os.makedirs(out_dir, exist_ok=True)
    record = {
        "stage": stage,
        "version": __version__,
        "argv": list(argv) if argv is not None else None,
        "config": config.to_dict(),
    }
    if extra:
        record.update(extra)
    path = os.path.join(out_dir, "run.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    return path
