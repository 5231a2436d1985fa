"""
Experiment plan configuration for the grid-cell mean-field laboratory
Presets, strict JSON loading and validation of every section
"""

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from src.errors import ValidationError
from src.model import (
    ExternalInput,
    FiringRate,
    GridCellParams,
    MexicanHat,
    ModelSpec,
    TauProfile,
    build_concrete_model,
    build_linear_test_model,
)
from src.noise import Mollifier, PROFILES, default_epsilon
from src.particles import HolderFieldFamily, perfect_root

VALID_LOG_LEVELS = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']
DEFAULT_PRESET = "gridcell-concrete"
DEFAULT_STEPS = 4096


@dataclass
class ModelSettings:
    """Network coefficients"""
    kind: str = "concrete"
    orientations: int = 1
    space_dim: int = 1
    tau_min: float = 1.0
    tau_max: float = 1.0
    tau_profile: str = "constant"
    firing_rate: str = "softplus"
    excitatory_amplitude: float = 1.0
    excitatory_width: float = 0.1
    inhibitory_amplitude: float = 0.5
    inhibitory_width: float = 0.3
    coupling_strength: float = 1.0
    external_base: List[float] = field(default_factory=lambda: [1.0])
    external_fourier: List[float] = field(default_factory=list)
    external_omega: float = 0.0
    noise_amplitude: float = 0.5
    activity_bound: float = 4.0
    relaxation: float = 1.0
    linear_coupling: float = 0.5
    linear_sigma_coupling: float = 0.1

    def validate(self) -> None:
        """Validate model settings"""
        if self.kind not in ("concrete", "linear"):
            raise ValidationError(f"Invalid model kind: {self.kind}. Must be 'concrete' or 'linear'", "model.kind")
        if self.orientations < 1:
            raise ValidationError("Number of orientations B must be at least 1", "model.orientations")
        if self.space_dim < 1:
            raise ValidationError("Space dimension d must be at least 1", "model.space_dim")
        if len(self.external_base) not in (1, self.orientations):
            raise ValidationError("external_base needs 1 or B values", "model.external_base")
        if self.coupling_strength < 0:
            raise ValidationError("coupling_strength cannot be negative", "model.coupling_strength")
        if self.kind == "concrete":
            self.to_params().validate()

    def to_params(self, alpha: float = 1.0) -> GridCellParams:
        kernel = MexicanHat(self.coupling_strength * self.excitatory_amplitude, self.excitatory_width,
                            self.coupling_strength * self.inhibitory_amplitude, self.inhibitory_width)
        base = self.external_base * self.orientations if len(self.external_base) == 1 else self.external_base
        return GridCellParams(
            orientations=self.orientations,
            space_dim=self.space_dim,
            tau=TauProfile(self.tau_min, self.tau_max, self.tau_profile),
            firing_rate=FiringRate(self.firing_rate),
            kernels=(kernel,) * self.orientations,
            external_input=ExternalInput(tuple(float(b) for b in base),
                                         tuple(float(a) for a in self.external_fourier),
                                         float(self.external_omega)),
            noise_amplitude=self.noise_amplitude,
            activity_bound=self.activity_bound,
            holder_exponent=alpha,
        )

    def build(self, alpha: float = 1.0) -> ModelSpec:
        if self.kind == "linear":
            return build_linear_test_model(self.orientations, self.space_dim, self.relaxation,
                                           self.linear_coupling, self.noise_amplitude,
                                           self.linear_sigma_coupling)
        return build_concrete_model(self.to_params(alpha))


@dataclass
class InitSettings:
    """Holder initial field"""
    alpha: float = 1.0
    n_modes: int = 64
    amplitude: float = 0.5
    profile_amplitude: float = 0.0

    def validate(self) -> None:
        """Validate initial-data settings"""
        if not (0 < self.alpha <= 1):
            raise ValidationError(f"alpha must lie in (0, 1], got {self.alpha}", "init.alpha")
        if self.n_modes < 0:
            raise ValidationError("n_modes cannot be negative", "init.n_modes")
        if self.amplitude < 0 or self.profile_amplitude < 0:
            raise ValidationError("Initial field amplitudes cannot be negative", "init.amplitude")

    def family(self, orientations: int, space_dim: int, master_seed: int) -> HolderFieldFamily:
        return HolderFieldFamily(self.alpha, orientations, space_dim, self.n_modes, self.amplitude,
                                 self.profile_amplitude, master_seed)


@dataclass
class NoiseSettings:
    """Correlated noise field"""
    mollifier: str = "bump"
    epsilon_policy: str = "linked"
    epsilon: float = 0.1
    block_steps: int = 64

    def validate(self) -> None:
        """Validate noise settings"""
        if self.mollifier not in PROFILES:
            raise ValidationError(f"Unknown mollifier '{self.mollifier}'. Must be one of {sorted(PROFILES)}",
                                  "noise.mollifier")
        if self.epsilon_policy not in ("fixed", "linked"):
            raise ValidationError("epsilon_policy must be 'fixed' or 'linked'", "noise.epsilon_policy")
        if self.epsilon <= 0:
            raise ValidationError("epsilon must be positive", "noise.epsilon")
        if self.block_steps < 1:
            raise ValidationError("block_steps must be positive", "noise.block_steps")

    def epsilon_for(self, n_columns: int, space_dim: int) -> float:
        if self.epsilon_policy == "fixed":
            return self.epsilon
        return default_epsilon(n_columns, space_dim)

    def mollifier_for(self, space_dim: int) -> Mollifier:
        return Mollifier(self.mollifier, space_dim)


@dataclass
class FPSettings:
    """Fokker-Planck reference resolution"""
    nodes: int = 0
    n_u: int = 400
    u_max: float = 4.0
    dt_pde: float = 0.0
    advection: str = "upwind"
    coupling: str = "explicit"
    refinement_check: bool = True
    refinement_tolerance: float = 0.01

    def validate(self) -> None:
        """Validate Fokker-Planck settings"""
        if self.nodes < 0:
            raise ValidationError("nodes cannot be negative (0 selects 4 max N)", "fp.nodes")
        if self.n_u < 2:
            raise ValidationError("n_u must be at least 2", "fp.n_u")
        if self.u_max <= 0:
            raise ValidationError("u_max must be positive", "fp.u_max")
        if self.dt_pde < 0:
            raise ValidationError("dt_pde cannot be negative (0 selects the stable default)", "fp.dt_pde")
        if self.advection not in ("hybrid", "upwind"):
            raise ValidationError("advection must be 'hybrid' or 'upwind'", "fp.advection")
        if self.coupling not in ("explicit", "picard"):
            raise ValidationError("coupling must be 'explicit' or 'picard'", "fp.coupling")
        if not (0 < self.refinement_tolerance < 1):
            raise ValidationError("refinement_tolerance must lie in (0, 1)", "fp.refinement_tolerance")


@dataclass
class ExperimentSettings:
    """Sizes, horizon and replicas"""
    sizes: List[List[int]] = field(default_factory=lambda: [[16, 8]])
    T: float = 1.0
    dt: float = 0.0
    replicas: int = 8
    master_seed: int = 0
    record_count: int = 32
    dt_check: str = "largest"
    exact_subsample: bool = True
    noise_check_nodes: int = 32
    noise_check_dt: float = 0.01
    noise_check_samples: int = 100_000
    noise_check_epsilon: float = 0.1

    def validate(self) -> None:
        """Validate experiment settings"""
        if not self.sizes:
            raise ValidationError("sizes must list at least one [N, M] pair", "experiment.sizes")
        for pair in self.sizes:
            if len(pair) != 2 or pair[0] < 1 or pair[1] < 1:
                raise ValidationError(f"Invalid [N, M] pair {pair}", "experiment.sizes")
        if self.T <= 0:
            raise ValidationError("T must be positive", "experiment.T")
        if self.dt < 0:
            raise ValidationError(f"dt cannot be negative (0 selects T/{DEFAULT_STEPS})", "experiment.dt")
        dt = self.step_size
        steps = round(self.T / dt)
        if abs(steps * dt - self.T) > 1e-9 * max(1.0, self.T):
            raise ValidationError(f"T={self.T} is not an integer multiple of dt={dt}", "experiment.dt")
        if self.record_count < 1 or steps % self.record_count:
            raise ValidationError("record_count must divide the number of steps T/dt", "experiment.record_count")
        if self.replicas < 1:
            raise ValidationError("replicas must be positive", "experiment.replicas")
        if len(self.sizes) >= 4 and self.replicas < 8:
            raise ValidationError("Slope fits need at least 8 replicas", "experiment.replicas")
        if self.master_seed < 0:
            raise ValidationError("master_seed cannot be negative", "experiment.master_seed")
        if self.dt_check not in ("none", "largest", "all"):
            raise ValidationError("dt_check must be 'none', 'largest' or 'all'", "experiment.dt_check")
        if self.noise_check_samples < 10_000:
            raise ValidationError("noise_check_samples must be at least 10^4", "experiment.noise_check_samples")

    @property
    def step_size(self) -> float:
        """Configured dt, or T/4096 when dt is 0"""
        return self.dt or self.T / DEFAULT_STEPS

    @property
    def record_times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.record_count + 1)


@dataclass
class RuntimeSettings:
    """Execution settings"""
    workers: int = 1
    log_level: str = "INFO"
    output_dir: str = "results"

    def validate(self) -> None:
        """Validate runtime settings"""
        if self.log_level.upper() not in VALID_LOG_LEVELS:
            raise ValidationError(f"Invalid log level: {self.log_level}. Must be one of {VALID_LOG_LEVELS}",
                                  "runtime.log_level")
        self.log_level = self.log_level.upper()
        if self.workers < 1:
            raise ValidationError("workers must be positive", "runtime.workers")


@dataclass
class ExperimentPlan:
    """Main configuration class"""
    preset: str = DEFAULT_PRESET
    model: ModelSettings = field(default_factory=ModelSettings)
    init: InitSettings = field(default_factory=InitSettings)
    noise: NoiseSettings = field(default_factory=NoiseSettings)
    fp: FPSettings = field(default_factory=FPSettings)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)
    runtime: RuntimeSettings = field(default_factory=RuntimeSettings)

    def validate(self) -> None:
        """Validate all configuration sections and cross-section constraints"""
        if self.preset not in PRESETS:
            raise ValidationError(f"Unknown preset '{self.preset}'. Must be one of {sorted(PRESETS)}", "preset")
        self.model.validate()
        self.init.validate()
        self.noise.validate()
        self.fp.validate()
        self.experiment.validate()
        self.runtime.validate()

        d = self.model.space_dim
        for N, _ in self.experiment.sizes:
            if perfect_root(N, d) is None:
                raise ValidationError(f"N must be a perfect d-th power (N={N}, d={d})", "experiment.sizes")
        if self.fp.nodes and perfect_root(self.fp.nodes, d) is None:
            raise ValidationError(f"FP nodes must be a perfect d-th power (P={self.fp.nodes}, d={d})", "fp.nodes")

    @property
    def record_times(self) -> np.ndarray:
        return self.experiment.record_times

    @property
    def max_columns(self) -> int:
        return max(N for N, _ in self.experiment.sizes)

    def fp_nodes(self) -> int:
        """Configured P, or the smallest perfect d-th power grid with at least 4 max(N) nodes aligned to it"""
        if self.fp.nodes:
            return self.fp.nodes
        d = self.model.space_dim
        factor = 1
        while factor ** d < 4:
            factor += 1
        return self.max_columns * factor ** d

    def build_model(self) -> ModelSpec:
        return self.model.build(self.init.alpha)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


PRESETS: Dict[str, Dict[str, Any]] = {
    "gridcell-concrete": {
        "model": {"orientations": 4, "space_dim": 1},
        "experiment": {"sizes": [[16, 8]], "replicas": 8},
    },
    "custom-linear-test": {
        "model": {"kind": "linear", "orientations": 1, "noise_amplitude": 0.3},
        "experiment": {"sizes": [[16, 8]], "replicas": 4, "dt_check": "none"},
    },
    "ou-test": {
        "model": {"orientations": 1, "firing_rate": "identity", "coupling_strength": 0.0,
                  "external_base": [0.3], "noise_amplitude": 0.5},
        "init": {"amplitude": 0.3},
        "fp": {"nodes": 1, "n_u": 400, "u_max": 3.0, "refinement_check": False},
        "experiment": {"sizes": [[100, 100]], "T": 10.0, "dt": 0.01, "replicas": 1,
                       "record_count": 10, "dt_check": "none"},
    },
    "rate-in-M": {
        "model": {"orientations": 1, "space_dim": 1},
        "init": {"alpha": 1.0},
        "experiment": {"sizes": [[64, 8], [64, 16], [64, 32], [64, 64], [64, 128]],
                       "T": 1.0, "replicas": 64},
    },
    "rate-in-N": {
        "model": {"orientations": 1, "space_dim": 1},
        "init": {"alpha": 0.5, "profile_amplitude": 1.0},
        "experiment": {"sizes": [[4, 256], [16, 256], [64, 256], [256, 256]],
                       "T": 1.0, "replicas": 8},
    },
    "empirical-measure": {
        "model": {"orientations": 1, "space_dim": 1},
        "init": {"alpha": 1.0},
        "experiment": {"sizes": [[64, 8], [64, 16], [64, 32], [64, 64], [64, 128]],
                       "T": 1.0, "replicas": 64,
                       "exact_subsample": True, "dt_check": "largest"},
    },
}

_SECTIONS = {
    "model": ModelSettings,
    "init": InitSettings,
    "noise": NoiseSettings,
    "fp": FPSettings,
    "experiment": ExperimentSettings,
    "runtime": RuntimeSettings,
}


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _coerce(section: str, name: str, kind: Any, value: Any) -> Any:
    where = f"{section}.{name}"
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{where} must be a number, got {value!r}", where)
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{where} must be an integer, got {value!r}", where)
        return value
    if kind is bool or kind is str:
        if not isinstance(value, kind):
            raise ValidationError(f"{where} must be a {kind.__name__}, got {value!r}", where)
        return value
    if not isinstance(value, list):
        raise ValidationError(f"{where} must be a list, got {value!r}", where)
    return copy.deepcopy(value)


class PlanLoader:
    """Loads experiment plans from files, dictionaries and environment variables"""

    @staticmethod
    def load_from_file(config_path: str) -> ExperimentPlan:
        """
        Load a plan from a JSON file

        Args:
            config_path: Path to configuration file

        Returns:
            ExperimentPlan (not yet validated)

        Raises:
            FileNotFoundError: If config file doesn't exist
            ValidationError: If the file is not valid JSON or has unknown keys
        """
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(f"Configuration file not found: {config_path}")

        try:
            with open(path, 'r') as f:
                config_data = json.load(f)
        except json.JSONDecodeError as e:
            raise ValidationError(
                f"Invalid JSON in configuration file {config_path} (line {e.lineno}, column {e.colno}): {e.msg}"
            )
        if not isinstance(config_data, dict):
            raise ValidationError("Configuration file must contain a JSON object")

        return PlanLoader.load_from_dict(config_data)

    @staticmethod
    def load_from_dict(config_data: Dict[str, Any]) -> ExperimentPlan:
        """Apply dataclass defaults, then the named preset, then the given values"""
        preset = config_data.get("preset", DEFAULT_PRESET)
        if preset not in PRESETS:
            raise ValidationError(f"Unknown preset '{preset}'. Must be one of {sorted(PRESETS)}", "preset")
        merged = _merge(PRESETS[preset], config_data)
        merged["preset"] = preset
        return PlanLoader._parse_config_dict(merged)

    @staticmethod
    def load(config_path: Optional[str] = None, preset: Optional[str] = None) -> ExperimentPlan:
        """
        Load a plan from file, preset or environment

        Priority:
        1. If config_path is provided, load from file
        2. If LAB_CONFIG env var is set, load from that file
        3. Otherwise, the named preset (or the default preset)

        LAB_LOG_LEVEL overrides runtime.log_level in every case.

        Args:
            config_path: Optional path to configuration file
            preset: Preset used when no file is given

        Returns:
            Validated ExperimentPlan

        Raises:
            ValidationError: If configuration is invalid
        """
        if config_path:
            plan = PlanLoader.load_from_file(config_path)
        elif os.getenv('LAB_CONFIG'):
            plan = PlanLoader.load_from_file(os.getenv('LAB_CONFIG'))
        else:
            plan = PlanLoader.load_from_dict({"preset": preset or DEFAULT_PRESET})

        if os.getenv('LAB_LOG_LEVEL'):
            plan.runtime.log_level = os.getenv('LAB_LOG_LEVEL')

        try:
            plan.validate()
        except ValidationError as e:
            raise ValidationError(f"Configuration validation failed: {e}", e.field_name)

        return plan

    @staticmethod
    def _parse_config_dict(config_data: Dict[str, Any]) -> ExperimentPlan:
        """Parse a merged configuration dictionary, rejecting unknown keys"""
        unknown = sorted(set(config_data) - set(_SECTIONS) - {"preset"})
        if unknown:
            raise ValidationError(f"Unknown configuration keys: {', '.join(unknown)}", unknown[0])

        sections = {}
        for name, section_cls in _SECTIONS.items():
            data = config_data.get(name, {})
            if not isinstance(data, dict):
                raise ValidationError(f"Section '{name}' must be a JSON object", name)
            known = {f.name: f.type for f in fields(section_cls)}
            extra = sorted(set(data) - set(known))
            if extra:
                raise ValidationError(
                    f"Unknown keys in section '{name}': {', '.join(extra)}", f"{name}.{extra[0]}"
                )
            values = {key: _coerce(name, key, known[key] if known[key] in (int, float, bool, str) else list, value)
                      for key, value in data.items()}
            sections[name] = section_cls(**values)

        return ExperimentPlan(preset=config_data.get("preset", DEFAULT_PRESET), **sections)


def load_config(path: Optional[str] = None, preset: Optional[str] = None) -> ExperimentPlan:
    """Fully validated plan from a file (or preset)"""
    return PlanLoader.load(path, preset)

