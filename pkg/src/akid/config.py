"""Declarative experiment configs: schema validation, overrides and Kid assembly."""
from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Any, Sequence

import jsonschema

from akid.blocks import ConfigError, build_block
from akid.brain import Brain
from akid.engine import EngineConfig
from akid.kid import Kid
from akid.kongfu import build_kongfu
from akid.sensor import FeedSensor, MNISTFeedSource, SyntheticSource

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}


def _obj(properties: dict, required: Sequence[str] = ()) -> dict:
    return {"type": "object", "properties": properties, "required": list(required), "additionalProperties": False}


_SCHEME = _obj({
    "name": {"enum": ["constant", "placeholder", "exp_decay"]},
    "lr": _NUM,
    "decay_rate": _NUM,
    "decay_steps": _POS_INT,
}, ["name"])

SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "source": _obj({
        "type": {"enum": ["mnist", "synthetic"]},
        "name": {"type": "string"},
        "url": {"type": "string"},
        "work_dir": {"type": "string"},
        "center": {"type": "boolean"},
        "scale": {"type": "boolean"},
        "num_train": _POS_INT,
        "num_val": {"type": "integer", "minimum": 0},
        "class_num": _POS_INT,
        "size": _POS_INT,
        "noise": _NUM,
        "seed": {"type": "integer", "minimum": 0},
    }, ["type"]),
    "sensor": _obj({
        "name": {"type": "string"},
        "batch_size": _POS_INT,
        "jokers": {"type": "array", "items": {"type": "object"}},
    }),
    "brain": _obj({
        "name": {"type": "string"},
        "blocks": {
            "type": "array",
            "minItems": 1,
            "items": {"type": "object", "required": ["type", "name"],
                      "properties": {"type": {"type": "string"}, "name": {"type": "string"}}},
        },
    }, ["blocks"]),
    "kongfu": _obj({
        "type": {"enum": ["momentum", "sgd"]},
        "name": {"type": "string"},
        "lr": {"type": ["number", "null"]},
        "momentum": _NUM,
        "lr_scheme": _SCHEME,
    }),
    "engine": _obj({
        "name": {"enum": ["single", "data_parallel"]},
        "num_towers": _POS_INT,
    }),
    "kid": _obj({
        "max_steps": _POS_INT,
        "max_epoch": _POS_INT,
        "val_interval": _POS_INT,
        "summary_interval": _POS_INT,
        "log_dir": {"type": "string"},
    }),
}, ["source", "brain", "kid"])

_MNIST_KEYS = {"type", "name", "url", "work_dir", "center", "scale", "num_train", "num_val"}
_SYNTHETIC_KEYS = {"type", "name", "center", "scale", "num_train", "num_val", "class_num", "size", "noise", "seed"}


def _path(parts) -> str:
    out = "$"
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def parse_config(doc: Any) -> dict:
    """Validate a config document (dict or JSON text) and return a deep copy.

    Errors are ConfigError with a JSON-path prefix such as ``$.kid.max_steps``.
    """
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as e:
            raise ConfigError(f"$: invalid JSON: {e}") from None
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(f"{_path(e.absolute_path)}: {e.message}")
    doc = copy.deepcopy(doc)
    src = doc["source"]
    allowed = _MNIST_KEYS if src["type"] == "mnist" else _SYNTHETIC_KEYS
    unknown = set(src) - allowed
    if unknown:
        raise ConfigError(f"$.source: keys {sorted(unknown)} do not apply to a {src['type']} source")
    kid = doc["kid"]
    if ("max_steps" in kid) == ("max_epoch" in kid):
        raise ConfigError("$.kid: give exactly one of max_steps and max_epoch")
    for i, block in enumerate(doc["brain"]["blocks"]):
        try:
            build_block(block)
        except (ConfigError, TypeError, ValueError) as e:
            raise ConfigError(f"$.brain.blocks[{i}]: {e}") from None
    for section, check in (("brain", lambda: build_brain(doc["brain"])),
                           ("kongfu", lambda: build_kongfu(doc.get("kongfu", {}))),
                           ("engine", lambda: EngineConfig.parse(doc.get("engine")))):
        try:
            check()
        except ConfigError as e:
            raise ConfigError(f"$.{section}: {e}") from None
    return doc


def bundled_config_path(name: str) -> Path:
    """Path of a config shipped with the package, e.g. ``lenet_mnist.json``."""
    path = Path(__file__).parent / "configs" / name
    if not path.is_file():
        raise ConfigError(f"no bundled config named {name!r}")
    return path


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    return parse_config(text)


def dumps(config: dict) -> str:
    return json.dumps(config, indent=2, sort_keys=True) + "\n"


def _literal(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: Sequence[str]) -> dict:
    """Apply ``--section.key=value`` overrides; values are JSON literals (bare words are strings).

    Integer path segments index into lists, e.g. ``--brain.blocks.0.out_channel_num=16``.
    """
    config = copy.deepcopy(config)
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form --section.key=value")
        dotted, raw = item[2:].split("=", 1)
        keys = dotted.split(".")
        if len(keys) < 2 or not all(keys):
            raise ConfigError(f"override {item!r} must name section.key")
        node: Any = config
        for i, key in enumerate(keys[:-1]):
            if isinstance(node, list):
                node = node[_index(key, node, keys[:i + 1])]
            else:
                node = node.setdefault(key, {})
        last = keys[-1]
        if isinstance(node, list):
            node[_index(last, node, keys)] = _literal(raw)
        elif isinstance(node, dict):
            node[last] = _literal(raw)
        else:
            raise ConfigError(f"override {item!r}: {'.'.join(keys[:-1])} is not an object")
    return config


def _index(key: str, node: list, keys) -> int:
    try:
        i = int(key)
        node[i]
    except (ValueError, IndexError):
        raise ConfigError(f"override path {'.'.join(keys)}: no list element {key!r}") from None
    return i


def build_source(cfg: dict, offline: bool = False):
    cfg = dict(cfg)
    kind = cfg.pop("type")
    if kind == "synthetic":
        return SyntheticSource(**cfg)
    return MNISTFeedSource(offline=offline, **cfg)


def build_brain(cfg: dict, seed: int = 0) -> Brain:
    brain = Brain(name=cfg.get("name", "brain"), seed=seed)
    for block_cfg in cfg["blocks"]:
        brain.attach(build_block(block_cfg))
    return brain


def build_kid(config: dict, log_dir=None, offline: bool = False) -> Kid:
    """Assemble an un-set-up Kid from a validated config."""
    seed = int(config.get("seed", 0))
    sensor_cfg = dict(config.get("sensor", {}))
    sensor = FeedSensor(source_in=build_source(config["source"], offline=offline), seed=seed, **sensor_cfg)
    brain = build_brain(config["brain"], seed=seed)
    kongfu = build_kongfu(config.get("kongfu", {"type": "momentum"}))
    kid_cfg = dict(config["kid"])
    cfg_log_dir = kid_cfg.pop("log_dir", None)
    return Kid(sensor, brain, kongfu, engine=config.get("engine"), seed=seed,
               log_dir=log_dir if log_dir is not None else cfg_log_dir, **kid_cfg)
