import logging
import os
from typing import Dict, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from app.models.schemas import DeviceConfig

logger = logging.getLogger(__name__)

ENV_PREFIX = "WORM_"


class ConfigError(Exception):
    fmt = "configuration error: {reason}"

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(self.fmt.format(reason=reason))


def known_keys():
    return {name.upper() for name in DeviceConfig.model_fields}


def read_config_values(path: Optional[str]) -> Dict[str, str]:
    """Flat KEY=VALUE file merged with WORM_<KEY> environment overrides"""
    load_dotenv()
    values: Dict[str, str] = {}
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        for key, value in dotenv_values(path).items():
            if value is None:
                raise ConfigError(f"key {key} has no value")
            values[key.strip().upper()] = value

    for key in known_keys():
        env_value = os.getenv(ENV_PREFIX + key)
        if env_value is not None:
            logger.debug(f"🔧 {key} overridden from environment")
            values[key] = env_value
    return values


def load_device_config(path: Optional[str] = None, **overrides) -> DeviceConfig:
    """Load and validate the device configuration (unknown keys are errors)"""
    values = read_config_values(path)
    for key, value in overrides.items():
        if value is not None:
            values[key.upper()] = value

    unknown = sorted(set(values) - known_keys())
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}")

    try:
        return DeviceConfig(**{key.lower(): value for key, value in values.items()})
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(part) for part in err['loc']).upper() or 'CONFIG'}: {err['msg']}"
            for err in e.errors()
        )
        raise ConfigError(problems) from e
