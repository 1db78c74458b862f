import json
from pathlib import Path

import pytest

from mfdkf.config import parse_config, scenario_to_dict
from mfdkf.errors import ConfigError, TopologyError
from mfdkf.noise import AlphaStableSpec, MixedGaussianSpec

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def test_defaults():
    config = parse_config(raw={"noise": "alpha(1.2,0,2,0)"})
    assert config.algorithm == "MFDKF"
    assert (config.kappa, config.xi, config.steps, config.runs, config.burn_in, config.seed) == (2, 0.0, 1000, 500, 100, 0)
    assert config.node == 4
    assert config.node_count == 10
    assert config.topology_name == "paper10"
    assert config.system.process_noise_value == 0.01
    assert config.anomaly.mode == "corrective"
    assert config.noise == AlphaStableSpec(1.2, 0.0, 2.0, 0.0)


def test_cv_defaults():
    config = parse_config(raw={"noise": "mixed(0.9,0,1,10000)", "system": "cv"})
    assert config.system.process_noise_value == 0.01


def test_single_node_topology_reports_node_one():
    config = parse_config(raw={"noise": "gaussian(0,1)", "topology": "single"})
    assert config.node_count == 1
    assert config.node == 1


@pytest.mark.parametrize(
    "raw,key,message",
    [
        ({"kappa": 0}, "kappa", "kappa must be ≥ 1"),
        ({"xi": 1.0}, "xi", "xi must satisfy 0 ≤ ξ < 1"),
        ({"xi": -0.5}, "xi", "xi must satisfy 0 ≤ ξ < 1"),
        ({"steps": 50, "burn_in": 50}, "steps", "steps must be > burn_in (50)"),
        ({"node": 11}, "node", "node must be in 1..10"),
        ({"algorithm": "KF"}, "algorithm", None),
        ({"system": "pendulum"}, "system.name", None),
        ({"kappa": 1.5}, "kappa", None),
        ({"foo": 1}, "foo", "unknown key"),
        ({"calibration": {"bogus": 1}}, "calibration.bogus", "unknown key"),
        ({"anomaly": {"mode": "ignore"}}, "anomaly.mode", None),
        ({"noise": "alpha(3,0,1,0)"}, "noise", None),
        ({"noise_overrides": {"12": "gaussian(0,1)"}}, "noise_overrides.12", None),
        ({"record_states": "false"}, "record_states", None),
        ({"record_states": 1}, "record_states", None),
    ],
)
def test_invalid_config(raw, key, message):
    base = {"noise": "gaussian(0,1)"}
    base.update(raw)
    with pytest.raises(ConfigError) as e:
        parse_config(raw=base)
    assert e.value.key == key
    if message is not None:
        assert e.value.message == message
        assert str(e.value) == f"{key}: {message}"


def test_missing_noise():
    with pytest.raises(ConfigError) as e:
        parse_config(raw={"system": "rotating"})
    assert e.value.key == "noise"


def test_noise_dimension_mismatch():
    raw = {"system": "cv", "noise": {"family": "gaussian", "mean": [0, 0, 0], "covariance": [[1, 0, 0], [0, 1, 0], [0, 0, 1]]}}
    with pytest.raises(ConfigError) as e:
        parse_config(raw=raw)
    assert e.value.key == "noise"


def test_bad_topology():
    with pytest.raises(TopologyError):
        parse_config(raw={"noise": "gaussian(0,1)", "topology": {"node_count": 3, "edges": [[1, 4]]}})


def test_custom_topology():
    config = parse_config(raw={"noise": "gaussian(0,1)", "topology": {"node_count": 3, "edges": [[1, 2], [2, 3]]}})
    assert config.topology.degrees.tolist() == [2, 3, 2]
    assert config.node == 1
    config = parse_config(raw={"noise": "gaussian(0,1)", "topology": {"name": "complete", "node_count": 5}})
    assert config.topology.degrees.tolist() == [5] * 5


def test_bikf_is_local_fusion_without_consensus():
    config = parse_config(raw={"noise": "gaussian(0,1)", "algorithm": "BIKF", "xi": 0.4})
    assert config.algorithm == "S-MFDKF"
    assert config.xi == 0.0
    config = parse_config(raw={"noise": "gaussian(0,1)", "algorithm": "C-MFDKF", "xi": 0.4}).with_overrides(algorithm="BIKF")
    assert (config.algorithm, config.xi) == ("S-MFDKF", 0.0)


def test_overrides():
    config = parse_config(raw={"noise": "gaussian(0,1)", "runs": 10}, runs=3, seed=None, kappa=4)
    assert config.runs == 3
    assert config.seed == 0
    assert config.kappa == 4
    assert config.with_overrides(xi=0.5, steps=None).xi == 0.5
    with pytest.raises(ConfigError):
        config.with_overrides(kappa=0)


def test_noise_overrides():
    config = parse_config(raw={"noise": "gaussian(0,1)", "noise_overrides": {"3": "mixed(0.9,0,1,2500)"}})
    assert config.noise_for(2) == MixedGaussianSpec(0.9, 0.0, 1.0, 2500.0)
    assert config.noise_for(0) == config.noise


def test_config_file(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps({"noise": "alpha(1.5,0,3,0)", "runs": 7}))
    assert parse_config(str(path)).runs == 7
    path.write_text("{not json")
    with pytest.raises(ConfigError) as e:
        parse_config(str(path))
    assert e.value.key == "config"


def test_round_trip_through_dict():
    config = parse_config(
        raw={
            "noise": "alpha(1.2,0,2,0)",
            "system": {"name": "cv", "process_noise": 0.02},
            "noise_overrides": {"5": "gaussian(0,1)"},
            "algorithm": "C-MFDKF",
            "xi": 0.35,
        }
    )
    raw = json.loads(json.dumps(scenario_to_dict(config)))
    again = parse_config(raw=raw)
    assert scenario_to_dict(again) == scenario_to_dict(config)
    assert again.noise_for(4) == config.noise_for(4)


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs(path):
    config = parse_config(str(path))
    assert config.steps > config.burn_in
    assert 1 <= config.node <= config.node_count
    assert config.system.process_noise_value == 0.01
