# %%
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, Mapping, Optional

import fsspec
import numpy as np

from .errors import ConfigError, ParameterDomainError
from .filters import ANOMALY_MODES
from .noise import EmConfig, NoiseSpec, parse_noise_spec, spec_to_dict
from .wsn import Topology, edge_list

logger = logging.getLogger(__name__)

ALGORITHMS = ("CDKF", "MFDKF", "C-MFDKF", "S-MFDKF")
ALGORITHM_ALIASES = {"BIKF": "S-MFDKF"}
SYSTEMS = ("rotating", "cv")

TOP_LEVEL_KEYS = {
    "system",
    "topology",
    "noise",
    "noise_overrides",
    "algorithm",
    "kappa",
    "xi",
    "steps",
    "runs",
    "burn_in",
    "seed",
    "node",
    "record_states",
    "calibration",
    "anomaly",
}
SECTION_KEYS = {
    "system": {"name", "theta", "process_noise"},
    "topology": {"name", "node_count", "edges"},
    "calibration": {"samples", "max_iter", "tol", "max_restarts", "samples_dir"},
    "anomaly": {"mode", "threshold"},
}


# %%
@dataclass(frozen=True)
class SystemConfig:
    name: str = "rotating"
    theta: float = np.pi / 18
    process_noise: Optional[float] = None

    @property
    def process_noise_value(self) -> float:
        if self.process_noise is not None:
            return self.process_noise
        return 0.01


@dataclass(frozen=True)
class CalibrationConfig:
    samples: int = 100000
    max_iter: int = 500
    tol: float = 1e-8
    max_restarts: int = 5
    samples_dir: Optional[str] = None

    def em_config(self) -> EmConfig:
        return EmConfig(max_iter=self.max_iter, tol=self.tol, max_restarts=self.max_restarts)


@dataclass(frozen=True)
class AnomalyConfig:
    mode: str = "corrective"
    threshold: float = 1e-300


@dataclass(frozen=True)
class ScenarioConfig:
    noise: NoiseSpec
    system: SystemConfig = field(default_factory=SystemConfig)
    topology: Topology = field(default_factory=Topology.paper10)
    topology_name: str = "paper10"
    noise_overrides: Dict[int, NoiseSpec] = field(default_factory=dict)
    algorithm: str = "MFDKF"
    kappa: int = 2
    xi: float = 0.0
    steps: int = 1000
    runs: int = 500
    burn_in: int = 100
    seed: int = 0
    node: int = 4
    record_states: bool = False
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    anomaly: AnomalyConfig = field(default_factory=AnomalyConfig)

    def __post_init__(self):
        validate_scenario(self)

    @property
    def node_count(self) -> int:
        return self.topology.node_count

    def noise_for(self, n: int) -> NoiseSpec:
        """Observation-noise spec of 0-based node n."""
        return self.noise_overrides.get(n, self.noise)

    def with_overrides(self, **kwargs) -> "ScenarioConfig":
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        if ALGORITHM_ALIASES.get(kwargs.get("algorithm")):
            kwargs["algorithm"] = ALGORITHM_ALIASES[kwargs["algorithm"]]
            kwargs["xi"] = 0.0
        return replace(self, **kwargs)


def validate_scenario(cfg: ScenarioConfig):
    if cfg.system.name not in SYSTEMS:
        raise ConfigError("system.name", f"unknown system {cfg.system.name!r}, expected one of {SYSTEMS}")
    if cfg.system.process_noise_value < 0:
        raise ConfigError("system.process_noise", "process noise must be ≥ 0")
    if cfg.algorithm not in ALGORITHMS:
        raise ConfigError("algorithm", f"unknown algorithm {cfg.algorithm!r}, expected one of {ALGORITHMS + tuple(ALGORITHM_ALIASES)}")
    if not _is_int(cfg.kappa) or cfg.kappa < 1:
        raise ConfigError("kappa", "kappa must be ≥ 1")
    if not 0.0 <= cfg.xi < 1.0:
        raise ConfigError("xi", "xi must satisfy 0 ≤ ξ < 1")
    if not _is_int(cfg.runs) or cfg.runs < 1:
        raise ConfigError("runs", "runs must be ≥ 1")
    if not _is_int(cfg.burn_in) or cfg.burn_in < 0:
        raise ConfigError("burn_in", "burn_in must be ≥ 0")
    if not _is_int(cfg.steps) or cfg.steps <= cfg.burn_in:
        raise ConfigError("steps", f"steps must be > burn_in ({cfg.burn_in})")
    if not _is_int(cfg.seed) or cfg.seed < 0:
        raise ConfigError("seed", "seed must be a non-negative integer")
    if not _is_int(cfg.node) or not 1 <= cfg.node <= cfg.node_count:
        raise ConfigError("node", f"node must be in 1..{cfg.node_count}")
    for n in cfg.noise_overrides:
        if not 0 <= n < cfg.node_count:
            raise ConfigError(f"noise_overrides.{n + 1}", f"node must be in 1..{cfg.node_count}")
    q = 1 if cfg.system.name == "rotating" else 2
    for n in range(cfg.node_count):
        spec = cfg.noise_for(n)
        if spec.dim not in (1, q):
            key = "noise" if n not in cfg.noise_overrides else f"noise_overrides.{n + 1}"
            raise ConfigError(key, f"noise dimension {spec.dim} does not match observation dimension {q}")
    if not _is_int(cfg.calibration.samples) or cfg.calibration.samples < 10 * cfg.kappa:
        raise ConfigError("calibration.samples", f"calibration.samples must be ≥ {10 * cfg.kappa} for kappa={cfg.kappa}")
    if not _is_int(cfg.calibration.max_iter) or cfg.calibration.max_iter < 1:
        raise ConfigError("calibration.max_iter", "calibration.max_iter must be ≥ 1")
    if cfg.calibration.tol <= 0:
        raise ConfigError("calibration.tol", "calibration.tol must be > 0")
    if not _is_int(cfg.calibration.max_restarts) or cfg.calibration.max_restarts < 0:
        raise ConfigError("calibration.max_restarts", "calibration.max_restarts must be ≥ 0")
    if cfg.anomaly.mode not in ANOMALY_MODES:
        raise ConfigError("anomaly.mode", f"unknown anomaly mode {cfg.anomaly.mode!r}, expected one of {ANOMALY_MODES}")
    if not 0 < cfg.anomaly.threshold < 1:
        raise ConfigError("anomaly.threshold", "anomaly.threshold must be in (0, 1)")


def _is_int(value) -> bool:
    return isinstance(value, (int, np.integer)) and not isinstance(value, bool)


# %%
def _check_keys(raw: Mapping, allowed, prefix: str = ""):
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{prefix}{key}", "unknown key")


def _as_int(raw: Mapping, key: str, path: str):
    value = raw[key]
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    if not _is_int(value):
        raise ConfigError(path, f"{path} must be an integer, got {value!r}")
    return int(value)


def _as_float(raw: Mapping, key: str, path: str):
    value = raw[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"{path} must be a number, got {value!r}")
    return float(value)


def _parse_noise(value, path: str) -> NoiseSpec:
    try:
        return parse_noise_spec(value)
    except ParameterDomainError as e:
        raise ConfigError(path, str(e))


def _parse_topology(value):
    if isinstance(value, str):
        if value == "paper10":
            return Topology.paper10(), "paper10"
        if value == "single":
            return Topology.isolated(1), "single"
        raise ConfigError("topology", f"unknown built-in topology {value!r}")
    _check_keys(value, SECTION_KEYS["topology"], "topology.")
    if "name" in value and "edges" not in value:
        if value["name"] == "complete":
            return Topology.complete(_as_int(value, "node_count", "topology.node_count")), "complete"
        if value["name"] == "isolated":
            return Topology.isolated(_as_int(value, "node_count", "topology.node_count")), "isolated"
        return _parse_topology(value["name"])
    if "node_count" not in value:
        raise ConfigError("topology.node_count", "missing required field")
    node_count = _as_int(value, "node_count", "topology.node_count")
    return Topology.from_edges(node_count, value.get("edges", [])), value.get("name", "custom")


def scenario_from_dict(raw: Mapping, **overrides) -> ScenarioConfig:
    """Validate a nested config mapping, apply defaults and any non-None overrides."""
    raw = dict(raw)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    _check_keys(raw, TOP_LEVEL_KEYS)
    if "noise" not in raw:
        raise ConfigError("noise", "missing required field")

    kwargs: Dict[str, Any] = {}
    system = raw.get("system", "rotating")
    if isinstance(system, str):
        system = {"name": system}
    _check_keys(system, SECTION_KEYS["system"], "system.")
    kwargs["system"] = SystemConfig(
        name=system.get("name", "rotating"),
        theta=_as_float(system, "theta", "system.theta") if "theta" in system else np.pi / 18,
        process_noise=_as_float(system, "process_noise", "system.process_noise") if "process_noise" in system else None,
    )

    kwargs["topology"], kwargs["topology_name"] = _parse_topology(raw.get("topology", "paper10"))
    kwargs["noise"] = _parse_noise(raw["noise"], "noise")
    noise_overrides = {}
    for node, spec in raw.get("noise_overrides", {}).items():
        if not str(node).isdigit():
            raise ConfigError(f"noise_overrides.{node}", "keys must be 1-based node ids")
        noise_overrides[int(node) - 1] = _parse_noise(spec, f"noise_overrides.{node}")
    kwargs["noise_overrides"] = noise_overrides

    algorithm = str(raw.get("algorithm", "MFDKF")).upper()
    if algorithm in ALGORITHM_ALIASES:
        algorithm = ALGORITHM_ALIASES[algorithm]
        if raw.get("xi", 0.0) != 0.0:
            logger.info(f"{raw['algorithm']} runs without consensus, ignoring xi={raw['xi']}")
        raw["xi"] = 0.0
    kwargs["algorithm"] = algorithm
    for key in ("kappa", "steps", "runs", "burn_in", "seed", "node"):
        if key in raw:
            kwargs[key] = _as_int(raw, key, key)
    kwargs.setdefault("node", 4 if kwargs["topology"].node_count >= 4 else 1)
    if "xi" in raw:
        kwargs["xi"] = _as_float(raw, "xi", "xi")
    if "record_states" in raw:
        if not isinstance(raw["record_states"], bool):
            raise ConfigError("record_states", f"expected true or false, got {raw['record_states']!r}")
        kwargs["record_states"] = raw["record_states"]

    calibration = raw.get("calibration", {})
    _check_keys(calibration, SECTION_KEYS["calibration"], "calibration.")
    cal = {}
    for key in ("samples", "max_iter", "max_restarts"):
        if key in calibration:
            cal[key] = _as_int(calibration, key, f"calibration.{key}")
    if "tol" in calibration:
        cal["tol"] = _as_float(calibration, "tol", "calibration.tol")
    if "samples_dir" in calibration:
        cal["samples_dir"] = calibration["samples_dir"]
    kwargs["calibration"] = CalibrationConfig(**cal)

    anomaly = raw.get("anomaly", {})
    _check_keys(anomaly, SECTION_KEYS["anomaly"], "anomaly.")
    kwargs["anomaly"] = AnomalyConfig(
        mode=anomaly.get("mode", "corrective"),
        threshold=_as_float(anomaly, "threshold", "anomaly.threshold") if "threshold" in anomaly else 1e-300,
    )
    return ScenarioConfig(**kwargs)


def parse_config(path: Optional[str] = None, raw: Optional[Mapping] = None, **overrides) -> ScenarioConfig:
    """Load a JSON scenario (local path or any fsspec URL) or a mapping, then validate it."""
    if raw is None:
        if path is None:
            raise ConfigError("config", "either a config path or a mapping is required")
        try:
            with fsspec.open(path, "r") as fp:
                raw = json.load(fp)
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"{path} is not valid JSON: {e}")
    if not isinstance(raw, Mapping):
        raise ConfigError("config", "top level must be an object")
    return scenario_from_dict(raw, **overrides)


def scenario_to_dict(cfg: ScenarioConfig) -> Dict:
    return {
        "system": {"name": cfg.system.name, "theta": cfg.system.theta, "process_noise": cfg.system.process_noise_value},
        "topology": {"name": cfg.topology_name, "node_count": cfg.node_count, "edges": edge_list(cfg.topology)},
        "noise": spec_to_dict(cfg.noise),
        "noise_overrides": {str(n + 1): spec_to_dict(spec) for n, spec in sorted(cfg.noise_overrides.items())},
        "algorithm": cfg.algorithm,
        "kappa": cfg.kappa,
        "xi": cfg.xi,
        "steps": cfg.steps,
        "runs": cfg.runs,
        "burn_in": cfg.burn_in,
        "seed": cfg.seed,
        "node": cfg.node,
        "record_states": cfg.record_states,
        "calibration": asdict(cfg.calibration),
        "anomaly": asdict(cfg.anomaly),
    }
