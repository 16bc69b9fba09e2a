import pytest
import yaml

from soundboxes.config import RunConfig, desk_config, load_config, save_config
from soundboxes.errors import ConfigError


def test_full_defaults():
    cfg = RunConfig()
    assert (cfg.model.n_train_boxes, cfg.model.n_infer_boxes, cfg.model.feature_dim, cfg.model.hidden) == (10, 80, 32, 128)
    assert (cfg.audio.n_fft, cfg.audio.hop, cfg.audio.sample_rate) == (1022, 256, 11025)
    assert cfg.separator_config().input_shape == (256, 256)


@pytest.mark.parametrize("key,value", [("model.n_train_boxes", 1), ("model.n_infer_boxes", 0),
                                       ("model.feature_dim", 0), ("model.head", "relu"),
                                       ("model.temperature", 0.0), ("audio.hop", 2000),
                                       ("train.optimizer", "lbfgs"), ("model.net_shape", [100, 32])])
def test_invalid_values(key, value):
    with pytest.raises(ConfigError):
        desk_config(**{key: value})


def test_replace_and_hash():
    a = desk_config()
    b = a.replace(**{"model.head": "sigmoid"})
    assert a.model.head == "softmax" and b.model.head == "sigmoid"
    assert a.config_hash() != b.config_hash()
    assert a.config_hash() == desk_config().config_hash()
    with pytest.raises(ConfigError):
        a.replace(**{"model.nope": 1})


def test_yaml_round_trip(tmp_path):
    cfg = desk_config(seed=4)
    save_config(cfg, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml").config_hash() == cfg.config_hash()


def test_profiles(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump({"profile": "desk", "model": {"head": "sigmoid"}}))
    cfg = load_config(p)
    assert cfg.model.head == "sigmoid" and cfg.audio.n_fft == desk_config().audio.n_fft
    p.write_text(yaml.safe_dump({"seed": 2}))
    assert load_config(p).audio.n_fft == 1022
    p.write_text(yaml.safe_dump({"profile": "huge"}))
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text(yaml.safe_dump({"model": {"colour": 1}}))
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("- a\n- b\n")
    with pytest.raises(ConfigError):
        load_config(p)
