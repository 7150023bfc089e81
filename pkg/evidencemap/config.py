"""
Run configuration.

Values are layered: dataclass defaults, then EVIDENCEMAP_* environment
variables, then an optional TOML file, then command-line flags.
"""

import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import toml

from evidencemap.core_types import AnalysisFlags
from evidencemap.errors import ConfigError, EvidenceMapError
from evidencemap.evaluation import EvalConfig
from evidencemap.ingestion import IngestConfig
from evidencemap.log import VALID_LEVELS
from evidencemap.pipeline import ModelConfig
from evidencemap.remote import API_KEY_ENV, DEFAULT_API_BASE
from evidencemap.training import TrainConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "EVIDENCEMAP_"

# env suffix -> (section, field)
ENV_FIELDS = {
    "LOG_LEVEL": (None, "log_level"),
    "SEED": ("train", "seed"),
    "EPOCHS": ("train", "epochs"),
    "LR": ("train", "learning_rate"),
    "BATCH": ("train", "batch_size"),
    "MAX_PAPERS": ("ingest", "max_paper_evidence"),
    "CACHE_DIR": ("ingest", "cache_dir"),
    "REMOTE_MODEL": ("ingest", "remote_model_name"),
    "API_BASE": (None, "api_base"),
    "TIMEOUT_SECONDS": (None, "timeout_seconds"),
}


@dataclass
class PathsConfig:
    data: Optional[Path] = None
    eval_data: Optional[Path] = None
    out: Path = Path("runs/latest")
    checkpoint: Optional[Path] = None
    templates: Optional[Path] = None


@dataclass
class RunConfig:
    ingest: IngestConfig = field(default_factory=IngestConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    api_base: str = DEFAULT_API_BASE
    timeout_seconds: int = 60
    log_level: str = "INFO"

    def sync(self) -> "RunConfig":
        """Propagate values that several stages share."""
        self.train.max_paper_evidence = self.ingest.max_paper_evidence
        self.model.max_slots = self.ingest.max_paper_evidence + 1
        self.model.seed = self.train.seed
        if Path(self.train.checkpoint_dir) == TrainConfig().checkpoint_dir:
            self.train.checkpoint_dir = Path(self.paths.out) / "checkpoints"
        return self

    def validate(self) -> "RunConfig":
        errors = []
        for part in (self.ingest, self.train, self.model, self.eval):
            try:
                part.validate()
            except ConfigError as exc:
                errors.append(str(exc))
        if self.timeout_seconds < 1:
            errors.append(f"timeout_seconds must be positive, got {self.timeout_seconds}")
        if errors:
            raise ConfigError("\n".join(errors))
        return self


def _check_int(errors: list, name: str, raw: str, minimum: Optional[int]) -> Optional[int]:
    try:
        value = int(raw)
    except ValueError:
        errors.append(f"{name} must be an integer, got '{raw}'")
        return None
    if minimum is not None and value < minimum:
        errors.append(f"{name} must be at least {minimum}, got {value}")
        return None
    return value


def _check_float(errors: list, name: str, raw: str, minimum: float) -> Optional[float]:
    try:
        value = float(raw)
    except ValueError:
        errors.append(f"{name} must be a number, got '{raw}'")
        return None
    if not value >= minimum:
        errors.append(f"{name} must be at least {minimum}, got {value}")
        return None
    return value


def validate_parameters(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """Validate every recognised EVIDENCEMAP_* variable; report all problems at once."""
    environ = os.environ if environ is None else environ
    errors: list = []
    values: Dict[str, Any] = {}

    def raw(suffix: str) -> Optional[str]:
        value = environ.get(ENV_PREFIX + suffix)
        return value if value not in (None, "") else None

    if raw("LOG_LEVEL") is not None:
        level = raw("LOG_LEVEL").upper()
        if level not in VALID_LEVELS:
            errors.append(f"{ENV_PREFIX}LOG_LEVEL must be one of {', '.join(VALID_LEVELS)}, got '{raw('LOG_LEVEL')}'")
        else:
            values["LOG_LEVEL"] = level
    for suffix, minimum in (("SEED", None), ("EPOCHS", 1), ("BATCH", 1), ("MAX_PAPERS", 1), ("TIMEOUT_SECONDS", 1)):
        if raw(suffix) is not None:
            parsed = _check_int(errors, ENV_PREFIX + suffix, raw(suffix), minimum)
            if parsed is not None:
                values[suffix] = parsed
    if raw("LR") is not None:
        parsed = _check_float(errors, f"{ENV_PREFIX}LR", raw("LR"), 0.0)
        if parsed is not None:
            values["LR"] = parsed
    if raw("CACHE_DIR") is not None:
        values["CACHE_DIR"] = Path(raw("CACHE_DIR"))
    if raw("REMOTE_MODEL") is not None:
        values["REMOTE_MODEL"] = raw("REMOTE_MODEL")
    if raw("API_BASE") is not None:
        base = raw("API_BASE")
        if not base.startswith(("http://", "https://")):
            errors.append(f"{ENV_PREFIX}API_BASE must be an http(s) URL, got '{base}'")
        else:
            values["API_BASE"] = base
    if raw("API_KEY") is not None and not raw("API_KEY").strip():
        errors.append(f"{API_KEY_ENV} is set but blank")

    if errors:
        raise ConfigError("Configuration errors:\n" + "\n".join(f"  - {e}" for e in errors))
    return values


def _coerce(section: str, name: str, ftype: Any, value: Any) -> Any:
    try:
        if ftype is AnalysisFlags:
            if isinstance(value, AnalysisFlags):
                return value
            names = value if isinstance(value, list) else [v for v in str(value).split(",") if v.strip()]
            return AnalysisFlags.from_names(names)
        if value is None:
            return None
        if ftype in (Path, Optional[Path]):
            return Path(value)
        if ftype is bool:
            if isinstance(value, bool):
                return value
            return str(value).strip().lower() in ("1", "true", "yes", "on")
        if ftype is int:
            return int(value)
        if ftype is float:
            return float(value)
        return str(value)
    except EvidenceMapError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}.{name}: cannot use value {value!r}: {exc}") from exc


def _set(config: RunConfig, section: Optional[str], name: str, value: Any) -> None:
    target = getattr(config, section) if section else config
    types = {f.name: f.type for f in fields(target)}
    where = f"{section}.{name}" if section else name
    if name not in types:
        raise ConfigError(f"unknown configuration key {where}")
    setattr(target, name, _coerce(section or "run", name, types[name], value))


def _apply_toml(config: RunConfig, path: Path) -> None:
    try:
        data = toml.load(str(path))
    except (OSError, toml.TomlDecodeError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    sections = {"ingest", "train", "model", "eval", "paths"}
    for key, value in data.items():
        if key in sections:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            for name, item in value.items():
                _set(config, key, name, item)
        else:
            _set(config, None, key, value)


def load_run_config(environ: Optional[Mapping[str, str]] = None, config_path: Optional[Path] = None,
                    overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Build the merged configuration.

    ``overrides`` uses dotted keys such as ``train.epochs``; None values are
    ignored so unset CLI flags never clobber file values.
    """
    config = RunConfig()
    for suffix, value in validate_parameters(environ).items():
        section, name = ENV_FIELDS[suffix]
        _set(config, section, name, value)
    if config_path is not None:
        _apply_toml(config, Path(config_path))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, name = key.rpartition(".")
        _set(config, section or None, name, value)
    return config.sync().validate()
