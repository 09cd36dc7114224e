# ==================================================
# File: config_loader.py
# key=value configuration files, environment fallback and flag overrides
# ==================================================

import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from errors import ConfigError
from pipeline_config import Config, RunConfig


class ConfigLoader:
    """Resolves a RunConfig from file, DRSL_* environment variables and flags"""

    def __init__(self, config_file: Optional[Path] = None, environ: Optional[Mapping[str, str]] = None):
        self.config_file = Path(config_file) if config_file else None
        self.environ = os.environ if environ is None else environ
        self.config = self._load_config()

    def _load_config(self) -> Dict[str, str]:
        """Raw string pairs from the file, then environment for unset keys"""
        config = {}

        if self.config_file is not None:
            if not self.config_file.exists():
                raise ConfigError(f"config file not found: {self.config_file}")
            config.update(self.parse_text(self.config_file.read_text(encoding="utf-8"),
                                          source=str(self.config_file)))

        # Fallback on environment variables
        for key in RunConfig.key_index():
            env_key = Config.ENV_PREFIX + key.upper()
            if key not in config and env_key in self.environ:
                config[key] = self.environ[env_key]

        return config

    @staticmethod
    def parse_text(text: str, source: str = "<text>") -> Dict[str, str]:
        pairs = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            if '=' not in line:
                raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split('=', 1)
            pairs[key.strip()] = value.strip().strip('"').strip("'")
        return pairs

    def resolve(self, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
        """Build a validated RunConfig; overrides (CLI flags) win over everything"""
        run = RunConfig()
        index = RunConfig.key_index()

        merged: Dict[str, Any] = dict(self.config)
        for key, value in (overrides or {}).items():
            if value is not None:
                merged[key] = value

        for key, raw in merged.items():
            if key not in index:
                raise ConfigError(f"unknown configuration key {key!r}")
            _, default = index[key]
            run.set(key, coerce(key, raw, default))

        return run.validate()

    @classmethod
    def from_text(cls, text: str) -> RunConfig:
        loader = cls(environ={})
        loader.config = cls.parse_text(text, source="<echo>")
        return loader.resolve()


def coerce(key: str, raw: Any, default: Any) -> Any:
    """Convert a raw string (or already typed flag value) to the default's type"""
    if not isinstance(raw, str):
        if isinstance(default, list) and isinstance(raw, (list, tuple)):
            return [int(v) for v in raw]
        return raw
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [int(v) for v in raw.split(',') if v.strip()]
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None
    return raw
