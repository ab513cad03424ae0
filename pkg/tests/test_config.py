import json

import pytest

from akid.blocks import ConfigError
from akid.config import apply_overrides, build_kid, bundled_config_path, dumps, load_config, parse_config

from conftest import CONFIG_DIR

EXPERIMENTS = ["lenet_mnist.json", "one_layer_mnist.json", "lenet_synthetic.json"]


def base():
    return json.loads((CONFIG_DIR / "lenet_synthetic.json").read_text())


@pytest.mark.parametrize("name", EXPERIMENTS)
def test_bundled_configs_validate_and_roundtrip(name):
    cfg = load_config(bundled_config_path(name))
    again = parse_config(dumps(cfg))
    assert again == cfg
    assert dumps(again) == dumps(cfg)


@pytest.mark.parametrize("mutate,path", [
    (lambda c: c["kid"].update(bogus=1), "$.kid"),
    (lambda c: c.update(extra={}), "$"),
    (lambda c: c["sensor"].update(batch_size=0), "$.sensor.batch_size"),
    (lambda c: c["brain"]["blocks"][2].update(colour="red"), "$.brain.blocks[2]"),
    (lambda c: c["brain"]["blocks"][1].pop("name"), "$.brain.blocks[1]"),
    (lambda c: c["kongfu"].update(lr_scheme={"name": "cosine"}), "$.kongfu.lr_scheme.name"),
    (lambda c: c["engine"].update(name="single", num_towers=2), "$.engine"),
    (lambda c: c["source"].update(url="http://x"), "$.source"),
    (lambda c: c["kid"].update(max_epoch=2), "$.kid"),
    (lambda c: c["brain"]["blocks"][-1].update(inputs=[{"name": "ghost"}]), "$.brain"),
])
def test_errors_are_path_precise(mutate, path):
    cfg = base()
    mutate(cfg)
    with pytest.raises(ConfigError) as exc:
        parse_config(cfg)
    assert str(exc.value).startswith(path + ":") or str(exc.value).startswith(path + "[")


def test_invalid_json_and_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config("{nope")
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    with pytest.raises(ConfigError):
        bundled_config_path("nope.json")


def test_overrides():
    cfg = apply_overrides(base(), ["--engine.num_towers=2", "--kid.max_steps=7", "--source.name=abc",
                                   "--brain.blocks.0.out_channel_num=3", "--kongfu.lr=1e-2"])
    assert cfg["engine"]["num_towers"] == 2
    assert cfg["kid"]["max_steps"] == 7
    assert cfg["source"]["name"] == "abc"
    assert cfg["brain"]["blocks"][0]["out_channel_num"] == 3
    assert cfg["kongfu"]["lr"] == 0.01
    kid = build_kid(parse_config(cfg))
    assert kid.engine_config.name == "data_parallel" and kid.engine_config.num_towers == 2
    assert base()["kid"]["max_steps"] == 100


@pytest.mark.parametrize("bad", ["engine.num_towers=2", "--engine", "--x=1", "--brain.blocks.99.name=a"])
def test_bad_overrides(bad):
    with pytest.raises(ConfigError):
        apply_overrides(base(), [bad])


def test_build_kid_wiring():
    kid = build_kid(parse_config(base()), log_dir="somewhere")
    assert [b.name for b in kid.brain.blocks][-1] == "loss"
    assert kid.max_steps == 100 and kid.sensor.batch_size == 32
    assert str(kid.log_dir) == "somewhere"


def test_one_layer_config_topology():
    kid = build_kid(load_config(CONFIG_DIR / "one_layer_mnist.json"))
    brain = kid.brain
    assert [b.name for b in brain.blocks] == ["conv1", "relu1", "pool1", "ip1", "loss"]
    assert [(r.name, r.idxs) for r in brain.refs["loss"]] == [("ip1", (0,)), ("system_in", (1,))]
