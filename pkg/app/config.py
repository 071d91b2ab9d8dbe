"""Run configuration: one JSON file plus command-line overrides.

Environment variables and dotenv files are deliberately not sources, so a
run is fully described by its config file and flags.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Optional

from pydantic import Field, ValidationError, model_validator
from pydantic_settings import (
    BaseSettings,
    JsonConfigSettingsSource,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
)

from app.errors import ConfigError
from app.models.config_models import (
    AttackConfig,
    CircuitConfig,
    DatasetSource,
    EvaluationConfig,
    FeatvisConfig,
    TrainConfig,
)

CHECKPOINT_SUFFIX = ".cbk"


class RunConfig(BaseSettings):
    """Everything one pipeline run needs."""

    model_config = SettingsConfigDict(extra="forbid")

    seed: int = 0
    num_threads: int = Field(default=1, ge=1)
    out_dir: Path = Path("runs/default")
    log_level: str = "INFO"
    log_dir: Path = Path("logs")

    dataset: DatasetSource = Field(default_factory=DatasetSource)
    train: TrainConfig = Field(default_factory=TrainConfig)
    featvis: FeatvisConfig = Field(default_factory=FeatvisConfig)
    circuits: CircuitConfig = Field(default_factory=CircuitConfig)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)

    baseline_checkpoint: Optional[Path] = None
    reference_checkpoint: Optional[Path] = None
    attacked_checkpoint: Optional[Path] = None

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        return (init_settings,)

    @model_validator(mode="after")
    def _check_paths(self) -> "RunConfig":
        if self.dataset.kind != "synthetic-blobs":
            if self.dataset.root is None or not self.dataset.root.exists():
                raise ValueError(f"dataset root {self.dataset.root} does not exist")
        missing = [str(p) for p in self.attack.fool_targets if not p.exists()]
        if missing:
            raise ValueError(f"fool target files not found: {missing}")
        return self

    # ── Paths ─────────────────────────────────────────────────────────────

    def checkpoint_path(self, role: str) -> Path:
        """Explicit ``<role>_checkpoint`` if set, else ``<out_dir>/checkpoints/<role>.cbk``."""
        explicit = getattr(self, f"{role}_checkpoint", None)
        return explicit or self.out_dir / "checkpoints" / f"{role}{CHECKPOINT_SUFFIX}"

    def snapshot(self) -> dict[str, Any]:
        """JSON-ready dump that :func:`load_run_config` accepts back unchanged."""
        return self.model_dump(mode="json")


def _deep_merge(base: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_run_config(path: Path | str | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Build a RunConfig from a JSON file and nested flag overrides.

    Raises
    ------
    ConfigError  if the file is missing, unreadable, not a JSON object, or
                 any value fails validation
    """
    values: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        if not path.is_file():
            raise ConfigError(f"config file {path} is not a regular file")
        try:
            values = JsonConfigSettingsSource(RunConfig, json_file=path)()
        except OSError as exc:
            raise ConfigError(f"config file {path} is unreadable: {exc.strerror or exc}") from exc
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"config file {path} is not a JSON object: {exc}") from exc
    values = _deep_merge(values, overrides or {})
    try:
        return RunConfig(**values)
    except ValidationError as exc:
        raise ConfigError(describe_validation_error(exc)) from exc


def describe_validation_error(exc: ValidationError) -> str:
    """``<dotted.field>: <message>`` for the first validation failure."""
    first = exc.errors()[0]
    where = ".".join(str(p) for p in first["loc"]) or "config"
    return f"{where}: {first['msg']}"


# ── Active settings ───────────────────────────────────────────────────────────

_active: RunConfig | None = None


def get_settings() -> RunConfig:
    """Return the active configuration, defaulting to built-in values."""
    global _active
    if _active is None:
        _active = RunConfig()
    return _active


def use_settings(cfg: RunConfig | None) -> None:
    """Install ``cfg`` as the active configuration (``None`` resets it)."""
    global _active
    _active = cfg


def setup_logging(cfg: RunConfig | None = None) -> None:
    """Configure the root logger from the active settings."""
    settings = cfg or get_settings()
    Path(settings.log_dir).mkdir(parents=True, exist_ok=True)

    logging.basicConfig(
        level=getattr(logging, settings.log_level.upper(), logging.INFO),
        format="%(asctime)s | %(levelname)-8s | %(name)s | %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        force=True,
    )
