"""Optimizers ("KongFu") and learning-rate schemes."""
from __future__ import annotations

import enum
from typing import Mapping

import numpy as np

from akid.blocks import ConfigError
from akid.tensor import Tensor


class LearningRateScheme(str, enum.Enum):
    constant = "constant"
    placeholder = "placeholder"
    exp_decay = "exp_decay"


class LearningRateError(RuntimeError):
    pass


def _parse_scheme(lr_scheme, lr) -> dict:
    if lr_scheme is None:
        lr_scheme = {"name": LearningRateScheme.constant, "lr": lr}
    scheme = dict(lr_scheme)
    try:
        scheme["name"] = LearningRateScheme(scheme.get("name", "constant"))
    except ValueError:
        raise ConfigError(f"unknown learning rate scheme {scheme.get('name')!r}") from None
    allowed = {
        LearningRateScheme.constant: {"name", "lr"},
        LearningRateScheme.placeholder: {"name"},
        LearningRateScheme.exp_decay: {"name", "lr", "decay_rate", "decay_steps"},
    }[scheme["name"]]
    unknown = set(scheme) - allowed
    if unknown:
        raise ConfigError(f"lr_scheme {scheme['name'].value}: unknown keys {sorted(unknown)}")
    if scheme["name"] is not LearningRateScheme.placeholder:
        scheme.setdefault("lr", lr)
        if scheme["lr"] is None or scheme["lr"] <= 0:
            raise ConfigError(f"learning rate must be > 0, got {scheme['lr']}")
    if scheme["name"] is LearningRateScheme.exp_decay:
        scheme.setdefault("decay_rate", 0.95)
        scheme.setdefault("decay_steps", 1000)
        if scheme["decay_steps"] <= 0:
            raise ConfigError("decay_steps must be > 0")
    return scheme


def learning_rate(scheme: Mapping, clock: int, fed: float | None = None) -> float:
    """Learning rate at training step ``clock``.

    exp_decay is the staircase form ``lr * decay_rate ** (clock // decay_steps)``.
    """
    name = LearningRateScheme(scheme["name"])
    if name is LearningRateScheme.constant:
        return float(scheme["lr"])
    if name is LearningRateScheme.exp_decay:
        return float(scheme["lr"]) * float(scheme["decay_rate"]) ** (clock // int(scheme["decay_steps"]))
    if fed is None:
        raise LearningRateError("placeholder learning rate scheme has no value fed for this step")
    return float(fed)


class KongFu:
    """Classical momentum: ``v <- mu * v + g``, ``theta <- theta - lr * v``.

    ``momentum=0`` is plain SGD.  Velocities are keyed by parameter name.
    """

    def __init__(self, name: str = "kongfu", lr: float | None = 0.01, momentum: float = 0.9, lr_scheme=None):
        self.name = name
        self.momentum = float(momentum)
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
        self.lr_scheme = _parse_scheme(lr_scheme, lr)
        self.velocity: dict[str, np.ndarray] = {}
        self._fed_lr: float | None = None

    def feed_lr(self, value: float) -> None:
        """Supply the learning rate for a placeholder scheme."""
        if value <= 0:
            raise ConfigError(f"learning rate must be > 0, got {value}")
        self._fed_lr = float(value)

    def learning_rate(self, clock: int) -> float:
        return learning_rate(self.lr_scheme, clock, self._fed_lr)

    def step(self, params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], clock: int) -> float:
        """Apply one update in place (parameters get fresh arrays).  Returns the learning rate used."""
        missing = set(params) - set(grads)
        if missing:
            raise KeyError(f"no gradient for parameter(s) {sorted(missing)}")
        lr = self.learning_rate(clock)
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=p.dtype)
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v.astype(p.dtype, copy=False)
            p.assign(p.data - p.dtype.type(lr) * self.velocity[name])
        return lr

    def state_dict(self) -> dict[str, np.ndarray]:
        return dict(self.velocity)

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self.velocity = {k: np.array(v) for k, v in state.items()}


class MomentumKongFu(KongFu):
    def __init__(self, name: str = "kongfu", lr: float | None = 0.025, momentum: float = 0.9, lr_scheme=None):
        super().__init__(name=name, lr=lr, momentum=momentum, lr_scheme=lr_scheme)


class SGDKongFu(KongFu):
    def __init__(self, name: str = "kongfu", lr: float | None = 0.01, lr_scheme=None):
        super().__init__(name=name, lr=lr, momentum=0.0, lr_scheme=lr_scheme)


def build_kongfu(config: Mapping) -> KongFu:
    config = dict(config)
    kind = config.pop("type", "momentum")
    if kind == "momentum":
        return MomentumKongFu(**config)
    if kind == "sgd":
        return SGDKongFu(**config)
    raise ConfigError(f"unknown kongfu type {kind!r}")
