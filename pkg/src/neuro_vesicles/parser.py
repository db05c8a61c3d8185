"""
Experiment configuration parser for YAML documents.

This module loads experiment configurations, converts validation failures into
messages that carry the dotted key path of the offending entry, and writes the
canonical resolved configuration that accompanies every run.
"""

import logging
import typing
from pathlib import Path
from typing import Any, Dict, List, Union

import yaml
from pydantic import BaseModel, ValidationError

from .models import ExperimentConfig

logger = logging.getLogger(__name__)


class ConfigParseError(ValueError):
    """Exception raised when an experiment configuration cannot be parsed."""
    pass


def _key_path(location: tuple) -> str:
    return ".".join(str(part) for part in location) or "<root>"


def _format_validation_error(error: ValidationError) -> str:
    lines = []
    for detail in error.errors():
        path = _key_path(detail["loc"])
        if detail["type"] == "extra_forbidden":
            lines.append(f"{path}: unknown key")
        else:
            lines.append(f"{path}: {detail['msg']}")
    return "Invalid configuration:\n" + "\n".join(f"  - {line}" for line in lines)


class ConfigParser:
    """
    Parser for experiment configuration files.

    Handles loading, validation and canonical re-serialization of
    `ExperimentConfig` documents.
    """

    @staticmethod
    def parse_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
        """
        Validate a configuration mapping.

        Args:
            data: Mapping with the experiment sections

        Returns:
            ExperimentConfig: Fully resolved configuration

        Raises:
            ConfigParseError: On unknown keys, type mismatches or constraint violations
        """
        if not isinstance(data, dict):
            raise ConfigParseError(f"Configuration root must be a mapping, got {type(data).__name__}")
        try:
            return ExperimentConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigParseError(_format_validation_error(e)) from e

    @staticmethod
    def parse_text(text: str) -> ExperimentConfig:
        """
        Parse a YAML (or JSON) configuration document.

        Args:
            text: Document text

        Returns:
            ExperimentConfig: Fully resolved configuration

        Raises:
            ConfigParseError: If the text is not valid YAML or fails validation
        """
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigParseError(f"Invalid YAML: {e}") from e
        return ConfigParser.parse_from_dict(data if data is not None else {})

    @staticmethod
    def load_from_file(file_path: Union[str, Path]) -> ExperimentConfig:
        """
        Load an experiment configuration from disk.

        Args:
            file_path: Path to the YAML file

        Returns:
            ExperimentConfig: Fully resolved configuration

        Raises:
            FileNotFoundError: If the file does not exist
            ConfigParseError: If the file content is invalid
        """
        path = Path(file_path)
        if not path.exists():
            raise FileNotFoundError(f"Configuration file not found: {file_path}")
        logger.debug("Loading configuration from %s", path)
        return ConfigParser.parse_text(path.read_text(encoding="utf-8"))

    @staticmethod
    def dump(config: ExperimentConfig) -> str:
        """Canonical YAML form of a resolved configuration (sorted keys, all defaults)."""
        return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=True, default_flow_style=False)

    @staticmethod
    def save_to_file(config: ExperimentConfig, file_path: Union[str, Path]) -> None:
        """
        Write the canonical resolved configuration.

        Args:
            config: Configuration to write
            file_path: Destination path

        Raises:
            ConfigParseError: If the file cannot be written
        """
        try:
            path = Path(file_path)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(ConfigParser.dump(config), encoding="utf-8")
        except OSError as e:
            raise ConfigParseError(f"Failed to save configuration to {file_path}: {e}") from e

    @staticmethod
    def validate_file(file_path: Union[str, Path]) -> tuple[bool, list[str]]:
        """
        Validate a configuration file without raising.

        Returns:
            Tuple of (is_valid, list_of_errors)
        """
        try:
            ConfigParser.load_from_file(file_path)
            return True, []
        except (ConfigParseError, FileNotFoundError) as e:
            return False, [str(e)]


def parse_config(text: str) -> ExperimentConfig:
    """
    Convenience function to parse configuration text.

    Raises:
        ConfigParseError: If the text is invalid
    """
    return ConfigParser.parse_text(text)


def _nested_model(annotation: Any) -> tuple[Any, bool]:
    """Return (model class, is_list) when a field holds sub-models, else (None, False)."""
    if isinstance(annotation, type) and issubclass(annotation, BaseModel):
        return annotation, False
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    if origin in (list, List) and args:
        inner = args[0]
        if isinstance(inner, type) and issubclass(inner, BaseModel):
            return inner, True
    return None, False


def _model_keys(model: type, prefix: str) -> List[str]:
    keys: List[str] = []
    for name, field in model.model_fields.items():
        path = f"{prefix}{name}"
        inner, is_list = _nested_model(field.annotation)
        if inner is None:
            keys.append(path)
        elif is_list:
            keys.extend(_model_keys(inner, f"{path}[]."))
        else:
            keys.extend(_model_keys(inner, f"{path}."))
    return keys


def config_keys() -> List[str]:
    """
    Every tunable key of the configuration schema in dotted form.

    Lists of sections are written as `section.field[].key`.
    """
    return sorted(_model_keys(ExperimentConfig, ""))


def flatten_keys(data: Dict[str, Any], prefix: str = "") -> List[str]:
    """Dotted keys of a dumped configuration, using the same notation as `config_keys`."""
    keys: set[str] = set()
    for name, value in data.items():
        path = f"{prefix}{name}"
        if isinstance(value, dict):
            keys.update(flatten_keys(value, f"{path}."))
        elif isinstance(value, list) and value and all(isinstance(item, dict) for item in value):
            for item in value:
                keys.update(flatten_keys(item, f"{path}[]."))
        else:
            keys.add(path)
    return sorted(keys)
