"""
Configuration
=============

- ``config/config.yml``: YAML run defaults, validated into ``RunDefaults``
- parameter files: flat ``key = value`` text with frequencies in ordinary MHz
  (2*pi applied on load), ``#`` comments; ``run.*`` keys are bookkeeping (only
  ``run.seed`` is read back) and ``flag.<command>.<name>`` keys become
  per-command flag defaults
- ``RunManifest``: the key-value record every command leaves behind, itself
  a valid parameter file
"""

import time
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

import structlog
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from core_model import ModeGeometry, PhysicalParams
from errors import ConfigError, TraceFormatError, describe
from file_formats import parse_key_values, write_key_values
from meanfield import IntegratorControls
from stochastic import StochasticConfig

logger = structlog.get_logger(__name__)

DEFAULT_CONFIG = Path(__file__).parent / "config" / "config.yml"

PARAMETER_KEYS = (
    "kappa_mhz",
    "gamma_mhz",
    "Gamma_over_gamma",
    "g_mhz",
    "delta_A_mhz",
    "delta_C_mhz",
    "eta_over_kappa",
    "n_atoms",
    "waist_um",
    "wavelength_nm",
    "coupling",
    "n_atoms_cloud",
)
LAB_UNIT_KEYS = PARAMETER_KEYS[:8]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PhysicsDefaults(_Section):
    kappa_mhz: float = 3.22
    gamma_mhz: float = 3.03
    Gamma_over_gamma: float = 0.93e-3
    g_mhz: float = 0.33
    delta_A_mhz: float = -35.0
    delta_C_mhz: float = 0.0
    eta_over_kappa: float = 18.0
    n_atoms: float = 2.0e4
    n_atoms_cloud: float = 1.0e5
    waist_um: float = Field(default=127.0, gt=0)
    wavelength_nm: float = Field(default=780.241, gt=0)
    coupling: Literal["averaged", "peak"] = "averaged"


class AnalysisDefaults(_Section):
    window_us: float = Field(default=500.0, gt=0)
    min_window_bins: int = Field(default=10, ge=2)
    smoothing_us: Optional[float] = None
    gamma_search: Tuple[float, float] = (1e-5, 1e-1)
    profile_points: int = Field(default=9, ge=3)
    fit_tol: float = Field(default=1e-3, gt=0)
    sweep_samples: int = Field(default=2000, ge=10)


class LoggingDefaults(_Section):
    level: str = "INFO"
    file: Optional[str] = None


class RunSection(_Section):
    out_dir: str = "results"
    seed: int = Field(default=0, ge=0)
    threads: int = Field(default=1, ge=1)
    t_end_us: float = Field(default=300_000.0, gt=0)
    mode: Literal["meanfield-full", "meanfield-slow", "stochastic"] = "meanfield-slow"
    n_traj: int = Field(default=1, ge=1)
    drives: List[float] = Field(default_factory=lambda: [10.0, 18.0, 31.6, 56.2, 100.0])


class RunDefaults(_Section):
    """Everything ``config/config.yml`` may set."""

    physics: PhysicsDefaults = PhysicsDefaults()
    integrator: IntegratorControls = IntegratorControls()
    stochastic: StochasticConfig = StochasticConfig()
    analysis: AnalysisDefaults = AnalysisDefaults()
    logging: LoggingDefaults = LoggingDefaults()
    run: RunSection = RunSection()


def _config_error(exc: ValidationError, prefix: str = "") -> ConfigError:
    first = exc.errors()[0]
    key = ".".join(str(part) for part in first["loc"])
    return ConfigError(f"{prefix}{key}", first["msg"])


def load_defaults(path: Optional[Union[str, Path]] = None) -> RunDefaults:
    """
    Load YAML run defaults

    Raises:
        ConfigError: Unreadable YAML, unknown key or invalid value
    """
    path = Path(path) if path else DEFAULT_CONFIG
    if not path.exists():
        logger.warning("defaults_missing", path=str(path))
        return RunDefaults()
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"invalid YAML: {exc}") from exc
    try:
        return RunDefaults.model_validate(data)
    except ValidationError as exc:
        raise _config_error(exc) from exc


class ParameterFile(BaseModel):
    """Contents of a ``key = value`` parameter file."""

    model_config = ConfigDict(frozen=True)

    path: Optional[str] = None
    seed: Optional[int] = None
    physics: Dict[str, Any] = Field(default_factory=dict)
    flags: Dict[str, Dict[str, str]] = Field(default_factory=dict)


def parse_parameters(text: str, source: str = "<text>") -> ParameterFile:
    """
    Parse parameter-file text

    Raises:
        ConfigError: Unknown key or a value that is not a number
    """
    physics: Dict[str, Any] = {}
    flags: Dict[str, Dict[str, str]] = {}
    seed: Optional[int] = None
    try:
        entries = parse_key_values(text, source)
    except TraceFormatError as exc:
        raise ConfigError(f"line {exc.line}", str(exc)) from exc
    for _, key, value in entries:
        if key == "run.seed":
            try:
                seed = int(value)
            except ValueError as exc:
                raise ConfigError(key, f"'{value}' is not an integer seed") from exc
            continue
        if key.startswith("run."):
            continue
        if key.startswith("flag."):
            parts = key.split(".", 2)
            if len(parts) != 3 or not all(parts):
                raise ConfigError(key, "expected flag.<command>.<name>")
            flags.setdefault(parts[1], {})[parts[2]] = value
            continue
        if key not in PARAMETER_KEYS:
            raise ConfigError(key, "unknown parameter key")
        if key == "coupling":
            if value not in ("averaged", "peak"):
                raise ConfigError(key, f"expected 'averaged' or 'peak', got '{value}'")
            physics[key] = value
            continue
        try:
            physics[key] = float(value)
        except ValueError as exc:
            raise ConfigError(key, f"'{value}' is not a number") from exc
    return ParameterFile(path=source, seed=seed, physics=physics, flags=flags)


def load_parameter_file(path: Union[str, Path]) -> ParameterFile:
    path = Path(path)
    if not path.exists():
        raise ConfigError(str(path), "parameter file not found")
    parameters = parse_parameters(path.read_text(encoding="utf-8"), str(path))
    logger.info("parameters.loaded", path=str(path), keys=len(parameters.physics), flags=len(parameters.flags))
    return parameters


def resolve_physics(
    defaults: RunDefaults,
    parameters: Optional[ParameterFile] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> Tuple[PhysicalParams, Dict[str, Any]]:
    """
    Merge defaults < parameter file < flag overrides into validated models

    Returns:
        (PhysicalParams, dict): The model and the resolved lab-unit values; the mode
        geometry keys are only range-checked here

    Raises:
        ConfigError: A merged value is out of range
    """
    values = defaults.physics.model_dump()
    if parameters is not None:
        values.update(parameters.physics)
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        physics = PhysicsDefaults.model_validate(values)
    except ValidationError as exc:
        raise _config_error(exc) from exc
    try:
        params = PhysicalParams.from_lab_units(**{key: getattr(physics, key) for key in LAB_UNIT_KEYS},
                                               coupling=physics.coupling)
        ModeGeometry.from_wavelength(physics.waist_um, physics.wavelength_nm)
    except ValidationError as exc:
        raise _config_error(exc) from exc
    return params, physics.model_dump()


class RunManifest:
    """
    Key-value record of one command invocation

    Written with ``run.*`` entries for bookkeeping, the resolved parameter
    keys and ``flag.<command>.<name>`` entries, so the manifest can be given
    back as ``--config`` to repeat the run.
    """

    def __init__(self, command: str, version: str, seed: Optional[int] = None):
        self.command = command
        self.version = version
        self.seed = seed
        self.status = "running"
        self.inputs: List[str] = []
        self.outputs: List[str] = []
        self.parameters: Dict[str, Any] = {}
        self.flags: Dict[str, Any] = {}
        self.notes: Dict[str, Any] = {}
        self._started = time.perf_counter()

    def add_input(self, path: Union[str, Path]) -> None:
        self.inputs.append(str(path))

    def add_output(self, path: Union[str, Path]) -> None:
        self.outputs.append(str(path))

    def fail(self, exc: BaseException) -> None:
        self.status = "failed"
        self.notes.update(describe(exc))

    def entries(self) -> Dict[str, Any]:
        values: Dict[str, Any] = {
            "run.command": self.command,
            "run.version": self.version,
            "run.seed": self.seed,
            "run.status": self.status,
            "run.duration_s": round(time.perf_counter() - self._started, 6),
        }
        values.update({f"run.input.{i}": path for i, path in enumerate(self.inputs)})
        values.update({f"run.output.{i}": path for i, path in enumerate(self.outputs)})
        values.update({f"run.{key}": value for key, value in self.notes.items()})
        values.update({key: value for key, value in self.parameters.items() if key in PARAMETER_KEYS})
        values.update({f"flag.{self.command}.{name}": value for name, value in self.flags.items()})
        return values

    def write(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / f"{self.command}_manifest.txt"
        write_key_values(path, self.entries(), header=f"{self.command} run manifest")
        logger.info("manifest.written", path=str(path), status=self.status)
        return path
