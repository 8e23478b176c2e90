"""
Tests for scenario parsing, validation and the built-in catalogue
Run with: pytest tests/test_scenarios.py -v
"""

import io
import json
from pathlib import Path

import numpy as np
import pytest

from fairshare.errors import InvalidInputError, ScenarioError
from fairshare.models import AllocatorKind
from fairshare.scenarios import (
    BUILTIN_SPECS,
    builtin_scenarios,
    load_scenarios,
    parse_scenario,
    random_region_spec,
)

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"


def minimal(**overrides):
    spec = {
        "capacity": {"A": [[1.0, 1.0]], "c": [1.0]},
        "traffic": {"nu_bar": [0.3, 0.3], "mu": [1.0, 1.0]},
    }
    spec.update(overrides)
    return spec


def parse_dict(spec):
    return parse_scenario(io.StringIO(json.dumps(spec)))


class TestParsing:
    """Reading scenario files"""

    def test_two_link_file(self):
        """The shipped two-link file builds its region and loads"""
        s = parse_scenario(SCENARIO_DIR / "two_link.json")
        assert s.name == "two_link"
        assert s.region.num_classes == 3
        assert s.region.num_links == 2
        np.testing.assert_allclose(s.model.rho, [0.4, 0.4, 0.4])
        assert s.spec.run.x0 == [1, 1, 1]

    def test_defaults(self):
        """Missing allocator and run sections fall back to defaults"""
        s = parse_dict(minimal())
        assert s.spec.allocator.kind == AllocatorKind.PF
        assert s.spec.run.box == 6
        assert s.spec.run.t_end is None
        assert s.model.P.sum() == 0

    def test_without_traffic(self):
        """Capacity alone is a valid scenario, but traffic is required later"""
        s = parse_dict({"capacity": {"A": [[1.0]], "c": [2.0]}})
        assert s.model is None
        with pytest.raises(ScenarioError, match="simulate"):
            s.require_model("simulate")

    def test_directory_loading(self):
        """A directory contributes every JSON file in it"""
        loaded = load_scenarios([SCENARIO_DIR])
        names = {s.name for s in loaded}
        assert {"two_link", "tandem", "erlang2"} <= names

    def test_phase_type_expansion(self):
        """Erlang phases expand to one class per phase"""
        s = parse_scenario(SCENARIO_DIR / "erlang2.json")
        expansion = s.expansion()
        assert expansion.num_phases == 4
        assert expansion.num_classes == 2
        np.testing.assert_allclose(expansion.mean_service(), [1.0, 1.0])


class TestValidation:
    """Errors name the offending key"""

    def test_row_sum_above_one(self):
        """A routing row summing to 1.5 is rejected at traffic.P"""
        spec = minimal(traffic={"nu_bar": [0.3, 0.3], "mu": [1.0, 1.0], "P": [[0.5, 1.0], [0.0, 0.0]]})
        with pytest.raises(ScenarioError) as exc:
            parse_dict(spec)
        assert "traffic.P" in str(exc.value)
        assert "row 0" in str(exc.value)

    def test_unknown_key(self):
        """Unknown keys are not silently ignored"""
        with pytest.raises(ScenarioError, match="colour"):
            parse_dict(minimal(colour="blue"))

    def test_empty_capacity(self):
        """A region needs a link and a class"""
        with pytest.raises(ScenarioError, match="capacity"):
            parse_dict(minimal(capacity={"A": [], "c": []}))

    def test_length_mismatch(self):
        """Traffic vectors must match the number of classes"""
        spec = minimal(traffic={"nu_bar": [0.3], "mu": [1.0, 1.0]})
        with pytest.raises(ScenarioError, match="traffic.nu_bar"):
            parse_dict(spec)

    def test_negative_rates(self):
        """Service rates must be positive"""
        spec = minimal(traffic={"nu_bar": [0.3, 0.3], "mu": [1.0, 0.0]})
        with pytest.raises(ScenarioError, match="traffic.mu"):
            parse_dict(spec)

    def test_unknown_allocator(self):
        """Allocator kinds are a closed set"""
        with pytest.raises(ScenarioError, match="allocator"):
            parse_dict(minimal(allocator={"kind": "max_min"}))

    def test_phase_type_with_routing(self):
        """Phase-type service cannot be mixed with inter-class routing"""
        spec = minimal(
            traffic={"nu_bar": [0.3, 0.0], "mu": [1.0, 1.0], "P": [[0.0, 1.0], [0.0, 0.0]]},
            phase_type=[{"alpha": [1.0], "rates": [1.0]}, {"alpha": [1.0], "rates": [1.0]}],
        )
        with pytest.raises(ScenarioError, match="phase_type"):
            parse_dict(spec)

    def test_malformed_json(self):
        """Broken JSON is a scenario error, not a crash"""
        with pytest.raises(ScenarioError, match="malformed"):
            parse_scenario(io.StringIO("{not json"))

    def test_missing_file(self, tmp_path):
        """Unreadable paths are reported"""
        with pytest.raises(ScenarioError, match="cannot read"):
            parse_scenario(tmp_path / "absent.json")

    def test_exit_code(self):
        """Scenario errors map to the invalid-input exit code"""
        assert ScenarioError.exit_code == 2


class TestBuiltins:
    """The built-in catalogue"""

    def test_all_builtins_build(self, builtins):
        """Every catalogue entry validates"""
        assert set(builtins) == set(BUILTIN_SPECS)
        for s in builtins.values():
            assert s.model is not None
            assert s.region.in_interior(s.model.rho)

    def test_shipped_files_match_catalogue(self):
        """JSON files under scenarios/ agree with the catalogue"""
        for path in SCENARIO_DIR.glob("*.json"):
            data = json.loads(path.read_text())
            assert data == {"name": path.stem, **BUILTIN_SPECS[path.stem]}

    def test_fig1_alias(self, builtins):
        """fig1 is the two-link network under its own name"""
        fig1, two_link = builtins["fig1"], builtins["two_link"]
        assert fig1.name == "fig1"
        np.testing.assert_array_equal(fig1.region.A, two_link.region.A)
        np.testing.assert_array_equal(fig1.model.rho, two_link.model.rho)
        assert parse_scenario(SCENARIO_DIR / "fig1.json").name == "fig1"

    def test_unknown_builtin(self):
        """Unknown names are rejected"""
        with pytest.raises(InvalidInputError):
            builtin_scenarios(["nope"])

    def test_random_region_is_seeded(self):
        """Random regions are reproducible and interior"""
        assert random_region_spec(7) == random_region_spec(7)
        s = builtin_scenarios(["random_7"])["random_7"]
        assert s.region.in_interior(s.model.rho)
        assert max(s.region.load(s.model.rho) / s.region.c) == pytest.approx(0.6, abs=1e-5)


class TestSeedScript:
    """scripts/seed_scenarios.py"""

    @pytest.fixture
    def seed_module(self):
        import importlib.util

        path = SCENARIO_DIR.parent / "scripts" / "seed_scenarios.py"
        spec = importlib.util.spec_from_file_location("seed_scenarios", path)
        module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(module)
        return module

    def test_writes_catalogue(self, seed_module, tmp_path):
        """Every builtin plus requested random regions lands in the directory"""
        written = seed_module.seed_scenarios(tmp_path, random_seeds=[11])
        assert written == len(BUILTIN_SPECS) + 1
        assert (tmp_path / "random_11.json").exists()
        assert parse_scenario(tmp_path / "two_link.json").region.num_links == 2

    def test_keeps_existing_files(self, seed_module, tmp_path):
        """Existing files survive unless overwrite is set"""
        (tmp_path / "tandem.json").write_text("{}")
        written = seed_module.seed_scenarios(tmp_path)
        assert written == len(BUILTIN_SPECS) - 1
        assert (tmp_path / "tandem.json").read_text() == "{}"
        assert seed_module.seed_scenarios(tmp_path, overwrite=True) == len(BUILTIN_SPECS)
