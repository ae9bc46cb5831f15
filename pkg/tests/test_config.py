import pytest

from halfsync.config import ConfigError, apply_overrides, config_from_dict, dump_config, load_config
from halfsync.numerics import Precision

BASE = {"model": {"feature_dim": 4, "hidden": 8}, "precision": {"preset": "fp16"}}


def test_partial_dict_uses_defaults():
    run = config_from_dict(BASE)
    assert run.model.hidden == 8 and run.policy.math == Precision.FP16 and run.cluster.n == 1


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="model.hiden"):
        config_from_dict({"model": {"feature_dim": 4, "hiden": 8}})
    with pytest.raises(ConfigError, match="section"):
        config_from_dict({"modle": {}})


def test_bad_values():
    with pytest.raises(ConfigError):
        config_from_dict({**BASE, "cluster": {"n": 0}})
    with pytest.raises(ConfigError):
        config_from_dict({**BASE, "cluster": {"transport": "carrier-pigeon"}})
    with pytest.raises(ConfigError):
        config_from_dict({**BASE, "train": {"loss_scale": 0}})


def test_overrides_parse_toml_literals():
    d = apply_overrides(BASE, ["cluster.n=4", "train.loss_scale=2.5", "cluster.transport=socket",
                               "precision.sync=\"fp32\""])
    run = config_from_dict(d)
    assert run.cluster.n == 4 and run.loss_scale == 2.5 and run.cluster.transport == "socket"
    assert run.policy.sync == Precision.FP32 and run.policy.math == Precision.FP16
    assert BASE["model"] == {"feature_dim": 4, "hidden": 8}  # input untouched
    with pytest.raises(ConfigError):
        apply_overrides(BASE, ["cluster.n"])
    with pytest.raises(ConfigError):
        apply_overrides(BASE, ["n=3"])


def test_dump_load_roundtrip(tmp_path):
    run = config_from_dict(apply_overrides(BASE, ["data.length_range=[200, 300]", "train.seed=9"]))
    path = tmp_path / "c.toml"
    dump_config(run, path, meta={"command": "train", "seed": 9})
    assert load_config(path) == run


def test_malformed_toml(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("[model\nfeature_dim = 3")
    with pytest.raises(ConfigError):
        load_config(p)
