import json

import pytest

from efc.config import ConfigError, ExperimentConfig, apply_overrides, config_from_dict, load_config


def test_defaults_validate_and_round_trip():
    cfg = ExperimentConfig().validate()
    assert config_from_dict(json.loads(cfg.to_json())) == cfg
    assert cfg.trainer.lambda_efm == 10.0 and cfg.trainer.eta == 0.1 and cfg.trainer.sigma == 0.2


def test_unknown_key_is_an_error():
    with pytest.raises(ConfigError, match="trainer.lamda"):
        config_from_dict({"trainer": {"lamda": 1.0}})
    with pytest.raises(ConfigError, match="unknown config key: data.colour"):
        apply_overrides(ExperimentConfig(), ["data.colour=red"])


def test_type_errors_name_the_field():
    with pytest.raises(ConfigError, match="trainer.batch_size: expected an integer"):
        config_from_dict({"trainer": {"batch_size": 1.5}})
    with pytest.raises(ConfigError, match="trainer.proto_update: expected true/false"):
        apply_overrides(ExperimentConfig(), ["trainer.proto_update=1"])
    with pytest.raises(ConfigError, match=r"model.hidden\[1\]"):
        config_from_dict({"model": {"hidden": [8, "x"]}})


def test_overrides():
    cfg = apply_overrides(ExperimentConfig(), [
        "seed=3", "trainer.lambda_efm=0", "trainer.loss_variant=FD+sym",
        "model.hidden=[32]", "trainer.lr_head=null",
    ])
    assert cfg.seed == 3
    assert cfg.trainer.lambda_efm == 0.0 and isinstance(cfg.trainer.lambda_efm, float)
    assert cfg.trainer.loss_variant == "FD+sym"
    assert cfg.model.hidden == [32]
    assert cfg.trainer.lr_head is None


@pytest.mark.parametrize("override, field", [
    ("trainer.sigma=0", "trainer.sigma"),
    ("trainer.eta=-1", "trainer.eta"),
    ("trainer.loss_variant=ewc", "trainer.loss_variant"),
    ("trainer.cov_policy=diag", "trainer.cov_policy"),
    ("scenario.steps=50", "scenario.steps"),
    ("schema_version=2", "schema_version"),
])
def test_validation_messages(override, field):
    with pytest.raises(ConfigError, match=field):
        apply_overrides(ExperimentConfig(), [override])


def test_malformed_override():
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), ["seed"])


def test_load_config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 4, "scenario": {"mode": "warm"}}))
    cfg = load_config(path)
    assert cfg.seed == 4 and cfg.scenario.mode == "warm"
    path.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(path)
