"""Command-line orchestration of the descriptor pipeline."""

from .config import ConfigError, MissingDependencyError, config_hash, preset_defaults, resolve_config
from .main import main, run

__all__ = ["ConfigError", "MissingDependencyError", "config_hash", "main", "preset_defaults", "resolve_config", "run"]
