"""
Test cases for configuration parsing and the resolved-config dump.
"""

import hashlib
import re
from pathlib import Path

import pytest
import yaml

from neuro_vesicles.models import ExperimentConfig
from neuro_vesicles.parser import ConfigParseError, ConfigParser, config_keys, flatten_keys, parse_config

MINIMAL_YAML = """
graph:
  num_nodes: 3
  edges: [[0, 1], [1, 2]]
network:
  widths: [2, 3, 1]
"""

SOURCE_DIR = Path(__file__).resolve().parent.parent / "src" / "neuro_vesicles"
CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
DATA_DIR = Path(__file__).resolve().parent / "data"
# sha256 of tests/data/minimal_resolved.yaml; changes whenever a schema default or key changes
MINIMAL_RESOLVED_SHA256 = "ba5e8496d08a7fd51fcdb3ba16d169069db714695e2ba1a88a731ae3541d3005"


class TestParseConfig:
    """Test cases for text parsing."""

    def test_minimal_config_resolves_defaults(self):
        """Test graph + widths give a fully resolved config."""
        config = parse_config(MINIMAL_YAML)

        assert config.vesicles.num_types == 1
        assert len(config.vesicles.types) == 1
        assert config.release.rho_write == 0.1
        assert config.graph.layer_of == [0, 1, 2]

    def test_round_trip_is_stable(self):
        """Test dump(parse(dump(x))) == dump(x)."""
        first = ConfigParser.dump(parse_config(MINIMAL_YAML))
        second = ConfigParser.dump(parse_config(first))

        assert first == second
        assert hashlib.sha256(first.encode()).hexdigest() == hashlib.sha256(second.encode()).hexdigest()

    def test_minimal_config_golden_digest(self):
        """Test the resolved dump of the bundled minimal config matches the committed file and digest."""
        dumped = ConfigParser.dump(ConfigParser.load_from_file(CONFIG_DIR / "minimal.yaml"))
        golden = (DATA_DIR / "minimal_resolved.yaml").read_text(encoding="utf-8")

        assert dumped == golden
        assert hashlib.sha256(dumped.encode("utf-8")).hexdigest() == MINIMAL_RESOLVED_SHA256

    def test_dump_has_sorted_keys(self):
        """Test the canonical dump lists sections alphabetically."""
        dumped = yaml.safe_load(ConfigParser.dump(parse_config(MINIMAL_YAML)))

        assert list(dumped) == sorted(dumped)

    def test_decay_rate_constraint_names_key(self):
        """Test a constraint violation reports the dotted key path."""
        text = MINIMAL_YAML + "vesicles:\n  types:\n    - decay_rate: 1.5\n"

        with pytest.raises(ConfigParseError) as excinfo:
            parse_config(text)

        assert "vesicles.types.0.decay_rate" in str(excinfo.value)

    def test_unknown_key_reported(self):
        """Test unknown keys are named in the message."""
        with pytest.raises(ConfigParseError) as excinfo:
            parse_config(MINIMAL_YAML + "kernels:\n  max_emits: 3\n")

        assert "kernels.max_emits: unknown key" in str(excinfo.value)

    def test_type_mismatch(self):
        """Test a wrongly typed value is reported with its path."""
        with pytest.raises(ConfigParseError) as excinfo:
            parse_config(MINIMAL_YAML + "run:\n  steps: many\n")

        assert "run.steps" in str(excinfo.value)

    def test_invalid_yaml(self):
        """Test malformed YAML raises a parse error."""
        with pytest.raises(ConfigParseError):
            parse_config("graph: [unclosed")

    def test_non_mapping_root(self):
        """Test a list document is rejected."""
        with pytest.raises(ConfigParseError):
            parse_config("- 1\n- 2\n")


class TestConfigFiles:
    """Test cases for file loading and saving."""

    def test_missing_file(self, tmp_path):
        """Test loading a missing file raises FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            ConfigParser.load_from_file(tmp_path / "absent.yaml")

    def test_save_and_load(self, tmp_path, chain_config):
        """Test a saved config loads back to an equal model."""
        path = tmp_path / "nested" / "resolved_config.yaml"
        ConfigParser.save_to_file(chain_config, path)

        assert ConfigParser.load_from_file(path) == chain_config

    def test_validate_file(self, tmp_path):
        """Test validation reports errors without raising."""
        good = tmp_path / "good.yaml"
        good.write_text(MINIMAL_YAML)
        bad = tmp_path / "bad.yaml"
        bad.write_text(MINIMAL_YAML + "unknown_section: 1\n")

        assert ConfigParser.validate_file(good) == (True, [])
        is_valid, errors = ConfigParser.validate_file(bad)
        assert not is_valid
        assert "unknown_section" in errors[0]

    @pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.yaml")), ids=lambda p: p.stem)
    def test_shipped_configs_validate(self, path):
        """Test every bundled experiment file validates."""
        assert ConfigParser.validate_file(path) == (True, [])


class TestResolvedConfigCompleteness:
    """Test cases for the config-key registry."""

    def test_dump_lists_every_schema_key(self):
        """Test the resolved dump contains every tunable of the schema."""
        dumped = yaml.safe_load(ConfigParser.dump(parse_config(MINIMAL_YAML)))

        assert flatten_keys(dumped) == config_keys()

    def test_source_references_are_registered(self):
        """Test every config.<section>.<key> read in the package is a schema key or property."""
        keys = set(config_keys())
        pattern = re.compile(r"config\.([a-z_]+)\.([a-z_]+)")
        referenced = set()
        for source in SOURCE_DIR.glob("*.py"):
            referenced.update(pattern.findall(source.read_text(encoding="utf-8")))

        assert referenced
        for section, key in referenced:
            section_model = ExperimentConfig.model_fields[section].annotation
            if isinstance(getattr(section_model, key, None), property):
                continue
            assert f"{section}.{key}" in keys, f"{section}.{key} is not in the resolved config"
