"""Config format tests: parsing, error reporting, and dataclass round trips."""

import pytest

from facefield.config import (ConfigError, dataclass_from_dict,
                              dataclass_to_dict, parse_config)
from facefield.scenegen import DatasetSpec
from facefield.training import StageSpec, TrainConfig


def test_parse_basic_types():
    text = """
    # a comment
    train.iterations = 2000
    train.lr_g = 6e-5
    train.pose_squared = true
    dataset.pose_sigma = 0.15, 0.3
    name = "quoted string"  # trailing comment
    bare = hello
    nothing = none
    """
    d = parse_config(text)
    assert d["train"]["iterations"] == 2000
    assert d["train"]["lr_g"] == 6e-5
    assert d["train"]["pose_squared"] is True
    assert d["dataset"]["pose_sigma"] == [0.15, 0.3]
    assert d["name"] == "quoted string"
    assert d["bare"] == "hello"
    assert d["nothing"] is None


def test_parse_rejects_bad_lines():
    with pytest.raises(ConfigError):
        parse_config("no equals sign here")
    with pytest.raises(ConfigError):
        parse_config("= value")
    with pytest.raises(ConfigError):
        parse_config("a = 1\na.b = 2")  # scalar vs section conflict


def test_dataclass_from_dict_nested():
    cfg = dataclass_from_dict(TrainConfig, {
        "iterations": 50,
        "sampling": {"n_samples": 12},
        "generator": {"trunk_width": 64, "trunk_depth": 4},
        "weights": {"lambda_p": 5.0},
    })
    assert cfg.iterations == 50
    assert cfg.sampling.n_samples == 12
    assert cfg.generator.trunk_width == 64
    assert cfg.weights.lambda_p == 5.0
    assert cfg.batch == 8  # untouched defaults survive


def test_dataclass_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        dataclass_from_dict(TrainConfig, {"iterations": 5, "iteratons": 9})


def test_dataclass_tuple_coercion():
    spec = dataclass_from_dict(DatasetSpec, {"pose_sigma": [0.1, 0.2]})
    assert spec.pose_sigma == (0.1, 0.2)


def test_dataclass_round_trip_with_schedule():
    cfg = TrainConfig(iterations=10, schedule=[(0, 32, 8), (5, 64, 4)])
    d = dataclass_to_dict(cfg)
    back = dataclass_from_dict(TrainConfig, d)
    assert back.schedule == [StageSpec(0, 32, 8), StageSpec(5, 64, 4)]
    assert dataclass_to_dict(back) == d
