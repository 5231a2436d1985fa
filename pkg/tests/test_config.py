"""
Tests for experiment plan configuration
Includes property-based tests and unit tests for plan loading and validation
"""

import json
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from src.config import (
    PRESETS,
    ExperimentPlan,
    ExperimentSettings,
    InitSettings,
    NoiseSettings,
    PlanLoader,
    RuntimeSettings,
    load_config,
)
from src.errors import ValidationError

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"
PRESET_FILES = ["custom-linear-test.json", "empirical-measure.json", "gridcell-concrete.json",
                "ou-test.json", "rate-in-M.json", "rate-in-N.json"]


def _write(tmp_path, data, name="plan.json"):
    path = tmp_path / name
    path.write_text(data if isinstance(data, str) else json.dumps(data))
    return str(path)


# ============================================================================
# Property-Based Tests
# ============================================================================

@st.composite
def valid_overrides(draw):
    """Generate valid plan overrides on top of any preset"""
    d = draw(st.integers(1, 2))
    side = draw(st.integers(1, 4))
    return {
        "preset": draw(st.sampled_from(sorted(PRESETS))),
        "model": {"space_dim": d},
        "init": {"alpha": draw(st.floats(0.01, 1.0)), "n_modes": draw(st.integers(0, 64))},
        "noise": {"epsilon_policy": draw(st.sampled_from(["fixed", "linked"])),
                  "epsilon": draw(st.floats(0.01, 0.5))},
        "experiment": {"sizes": [[side ** d, draw(st.integers(1, 16))]],
                       "master_seed": draw(st.integers(0, 2 ** 31 - 1))},
        "runtime": {"log_level": draw(st.sampled_from(["debug", "INFO", "Warning"]))},
    }


@given(overrides=valid_overrides())
@settings(max_examples=100, deadline=None)
def test_property_plan_round_trip(overrides):
    """
    **Feature: experiment-config, Property 1: Config round-trip**

    For any valid plan, serializing the validated plan and reloading it
    yields an equal plan with the same hash.
    """
    plan = PlanLoader.load_from_dict(overrides)
    plan.validate()

    reloaded = PlanLoader.load_from_dict(json.loads(json.dumps(plan.to_dict())))
    reloaded.validate()

    assert reloaded == plan
    assert reloaded.config_hash() == plan.config_hash()
    assert plan.runtime.log_level in ("DEBUG", "INFO", "WARNING")


# ============================================================================
# Unit Tests for Section Validation
# ============================================================================

class TestInitSettings:
    """Tests for InitSettings"""

    def test_alpha_above_one_rejected(self):
        with pytest.raises(ValidationError, match="alpha") as exc:
            InitSettings(alpha=1.5).validate()
        assert exc.value.field_name == "init.alpha"

    def test_alpha_zero_rejected(self):
        with pytest.raises(ValidationError):
            InitSettings(alpha=0.0).validate()

    def test_family_carries_settings(self):
        family = InitSettings(alpha=0.5, n_modes=12).family(orientations=3, space_dim=2, master_seed=9)
        assert (family.alpha, family.orientations, family.space_dim, family.n_modes, family.master_seed) == \
            (0.5, 3, 2, 12, 9)


class TestNoiseSettings:
    """Tests for NoiseSettings"""

    def test_linked_epsilon_follows_grid(self):
        settings_ = NoiseSettings(epsilon_policy="linked")
        assert settings_.epsilon_for(8, 1) == pytest.approx(1.0 / 24.0)

    def test_fixed_epsilon(self):
        assert NoiseSettings(epsilon_policy="fixed", epsilon=0.2).epsilon_for(64, 1) == 0.2

    def test_unknown_mollifier_rejected(self):
        with pytest.raises(ValidationError, match="mollifier"):
            NoiseSettings(mollifier="tophat").validate()


class TestExperimentSettings:
    """Tests for ExperimentSettings"""

    def test_horizon_must_be_multiple_of_dt(self):
        with pytest.raises(ValidationError, match="multiple of dt"):
            ExperimentSettings(T=1.005, dt=0.01).validate()

    def test_record_count_divides_steps(self):
        with pytest.raises(ValidationError, match="record_count"):
            ExperimentSettings(T=1.0, dt=0.01, record_count=3).validate()

    def test_slope_plans_need_eight_replicas(self):
        sizes = [[64, 8], [64, 16], [64, 32], [64, 64]]
        with pytest.raises(ValidationError, match="8 replicas"):
            ExperimentSettings(sizes=sizes, replicas=4).validate()

    def test_record_times(self):
        times = ExperimentSettings(T=1.0, dt=0.01, record_count=4).record_times
        assert list(times) == [0.0, 0.25, 0.5, 0.75, 1.0]

    def test_zero_dt_selects_horizon_over_4096(self):
        exp = ExperimentSettings(T=2.0)
        exp.validate()
        assert exp.step_size == pytest.approx(2.0 / 4096)
        assert len(exp.record_times) == 33
        assert exp.record_times[-1] == pytest.approx(2.0)

    def test_negative_dt_rejected(self):
        with pytest.raises(ValidationError, match="negative"):
            ExperimentSettings(dt=-0.01).validate()

    def test_empirical_preset_checks_dt_halving(self):
        exp = PlanLoader.load_from_dict({"preset": "empirical-measure"}).experiment
        assert exp.dt_check == "largest"
        assert exp.step_size == pytest.approx(1.0 / 4096)


class TestRuntimeSettings:
    """Tests for RuntimeSettings"""

    def test_invalid_log_level_raises_error(self):
        with pytest.raises(ValidationError, match="Invalid log level"):
            RuntimeSettings(log_level="VERBOSE").validate()

    def test_log_level_case_insensitive(self):
        runtime = RuntimeSettings(log_level="debug")
        runtime.validate()
        assert runtime.log_level == "DEBUG"


class TestExperimentPlan:
    """Tests for ExperimentPlan cross-section checks"""

    def test_minimal_config_uses_documented_defaults(self):
        plan = PlanLoader.load_from_dict({"preset": "gridcell-concrete"})
        plan.validate()
        assert plan.model.orientations == 4
        assert plan.init.alpha == 1.0
        assert plan.experiment.T == 1.0
        assert plan.experiment.dt == 0.0
        assert plan.experiment.step_size == pytest.approx(1.0 / 4096)
        assert plan.experiment.record_count == 32
        assert plan.fp.n_u == 400
        assert plan.fp.advection == "upwind"

    def test_grid_size_must_be_perfect_power(self):
        plan = PlanLoader.load_from_dict({"model": {"space_dim": 2}, "experiment": {"sizes": [[10, 4]]}})
        with pytest.raises(ValidationError, match="N must be a perfect d-th power"):
            plan.validate()

    def test_default_fp_nodes(self):
        one_d = PlanLoader.load_from_dict({"experiment": {"sizes": [[16, 4], [8, 4]]}})
        assert one_d.fp_nodes() == 64
        two_d = PlanLoader.load_from_dict({"model": {"space_dim": 2}, "experiment": {"sizes": [[16, 4]]}})
        assert two_d.fp_nodes() == 64

    def test_hash_depends_on_seed(self):
        first = PlanLoader.load_from_dict({"experiment": {"master_seed": 1}})
        second = PlanLoader.load_from_dict({"experiment": {"master_seed": 2}})
        assert first.config_hash() != second.config_hash()
        assert first.config_hash() == PlanLoader.load_from_dict({"experiment": {"master_seed": 1}}).config_hash()

    def test_linear_model_builds(self):
        plan = PlanLoader.load_from_dict({"preset": "custom-linear-test"})
        plan.validate()
        assert plan.build_model().name == "custom-linear-test"


class TestPlanLoader:
    """Tests for PlanLoader"""

    @pytest.mark.parametrize("name", PRESET_FILES)
    def test_shipped_configs_validate(self, name):
        plan = load_config(str(CONFIG_DIR / name))
        assert plan.preset == name[:-len(".json")]

    def test_load_from_nonexistent_file_raises_error(self):
        with pytest.raises(FileNotFoundError):
            PlanLoader.load_from_file('/nonexistent/plan.json')

    def test_invalid_json_reports_line(self, tmp_path):
        path = _write(tmp_path, '{\n  "preset": "ou-test",\n  "model": {,}\n}')
        with pytest.raises(ValidationError, match=r"Invalid JSON .*line 3"):
            PlanLoader.load_from_file(path)

    def test_unknown_section_rejected(self, tmp_path):
        path = _write(tmp_path, {"preset": "ou-test", "modle": {}})
        with pytest.raises(ValidationError, match="Unknown configuration keys: modle"):
            load_config(path)

    def test_unknown_field_rejected(self, tmp_path):
        path = _write(tmp_path, {"experiment": {"replica": 8}})
        with pytest.raises(ValidationError, match="replica") as exc:
            load_config(path)
        assert exc.value.field_name == "experiment.replica"

    def test_wrong_type_rejected(self):
        with pytest.raises(ValidationError, match="experiment.T must be a number"):
            PlanLoader.load_from_dict({"experiment": {"T": "1.0"}})

    def test_unknown_preset_rejected(self):
        with pytest.raises(ValidationError, match="Unknown preset"):
            PlanLoader.load_from_dict({"preset": "rate-in-K"})

    def test_load_validates_plan(self, tmp_path):
        path = _write(tmp_path, {"init": {"alpha": 1.5}})
        with pytest.raises(ValidationError, match="Configuration validation failed"):
            load_config(path)

    def test_environment_variables(self, tmp_path, monkeypatch):
        path = _write(tmp_path, {"preset": "ou-test"})
        monkeypatch.setenv("LAB_CONFIG", path)
        monkeypatch.setenv("LAB_LOG_LEVEL", "warning")
        plan = PlanLoader.load()
        assert plan.preset == "ou-test"
        assert plan.runtime.log_level == "WARNING"

    def test_preset_without_file(self, monkeypatch):
        monkeypatch.delenv("LAB_CONFIG", raising=False)
        plan = PlanLoader.load(preset="rate-in-N")
        assert plan.init.alpha == 0.5
        assert [N for N, _ in plan.experiment.sizes] == [4, 16, 64, 256]

