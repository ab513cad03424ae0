"""Data-parallel training engine.

A batch is split across ``num_towers`` replicas of the brain.  Each tower
computes its sub-batch loss and gradients on its own thread; the coordinator
waits for all of them, combines gradients as the size-weighted mean
``sum(B_i / B * g_i)`` (equal to the full-batch gradient for uneven splits
too), applies a single optimizer step to the master parameters, and copies
the new values back into every tower.

Batch norm in a tower normalizes with that tower's statistics; running
statistics are taken from tower 0.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from akid.blocks import ConfigError
from akid.brain import Brain
from akid.kongfu import KongFu
from akid.rng import derive_seed
from akid.tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class EngineConfig:
    name: str = "single"
    num_towers: int = 1

    def __post_init__(self):
        if self.name not in ("single", "data_parallel"):
            raise ConfigError(f"unknown engine {self.name!r}")
        if int(self.num_towers) < 1:
            raise ConfigError("num_towers must be >= 1")
        if self.name == "single" and self.num_towers != 1:
            raise ConfigError("the single engine has exactly one tower")
        self.num_towers = int(self.num_towers)

    @classmethod
    def parse(cls, cfg) -> "EngineConfig":
        if cfg is None:
            return cls()
        if isinstance(cfg, EngineConfig):
            return cfg
        cfg = dict(cfg)
        if "num_gpu" in cfg:
            cfg["num_towers"] = cfg.pop("num_gpu")
        if "name" not in cfg:
            cfg["name"] = "data_parallel" if int(cfg.get("num_towers", 1)) > 1 else "single"
        unknown = set(cfg) - {"name", "num_towers"}
        if unknown:
            raise ConfigError(f"engine: unknown keys {sorted(unknown)}")
        return cls(**cfg)


class TowerResult(NamedTuple):
    size: int
    loss: float
    accuracy: float
    grads: dict[str, np.ndarray]


class StepResult(NamedTuple):
    loss: float
    accuracy: float
    grads: dict[str, np.ndarray]
    lr: float


def split_batch(data: Tensor, labels: Tensor, k: int) -> list[tuple[Tensor, Tensor]]:
    """Split along axis 0 into ``k`` parts whose sizes differ by at most one (extras go first)."""
    b = data.shape[0]
    if labels.shape[0] != b:
        raise ValueError(f"data has {b} examples, labels {labels.shape[0]}")
    if b < k:
        raise ValueError(f"cannot split a batch of {b} across {k} towers without empty towers")
    base, extra = divmod(b, k)
    out, start = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        out.append((Tensor(data.data[start:start + size]), Tensor(labels.data[start:start + size])))
        start += size
    return out


def compute_gradients(brain: Brain, data: Tensor, labels: Tensor) -> TowerResult:
    """Forward + backward on one brain; returns mean loss, accuracy and per-parameter gradients."""
    params = brain.params()
    with Tape() as tape:
        out = brain.forward([data, labels])
    if out.loss is None:
        raise ConfigError(f"brain {brain.name!r} has no loss block")
    grads = tape.gradient(out.loss, list(params.values()))
    accuracy = float(out.eval[0].item()) if out.eval else float("nan")
    return TowerResult(data.shape[0], float(out.loss.item()), accuracy, dict(zip(params, grads)))


class Engine:
    """Runs one training step on the master brain, optionally across towers."""

    def __init__(self, brain: Brain, config=None, seed: int = 0):
        self.config = EngineConfig.parse(config)
        self.brain = brain
        self.seed = seed
        self.towers: list[Brain] = []
        self.generation = 0
        self.copies = 0
        self._synced: list[int] = []
        self._pool: ThreadPoolExecutor | None = None

    @property
    def num_towers(self) -> int:
        return self.config.num_towers

    @property
    def parallel(self) -> bool:
        return self.config.name == "data_parallel"

    def setup(self) -> None:
        if not self.brain.is_setup:
            raise ConfigError("engine needs a brain that is already set up")
        if self.parallel:
            self.towers = [self.brain.replicate() for _ in range(self.num_towers)]
            self._synced = [-1] * self.num_towers
            self.sync_replicas()

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def sync_replicas(self) -> int:
        """Copy master parameters into every tower.  Returns the number of tensor copies made."""
        master = self.brain.params()
        n = 0
        for i, tower in enumerate(self.towers):
            tparams = tower.params()
            for name, p in master.items():
                tparams[name].assign(p.data)
                n += 1
            self._synced[i] = self.generation
        self.copies += n
        return n

    def _run_tower(self, i: int, data: Tensor, labels: Tensor, clock: int) -> TowerResult:
        if self._synced[i] != self.generation:
            raise RuntimeError(f"tower {i} holds generation {self._synced[i]}, master is at {self.generation}")
        tower = self.towers[i]
        tower.reseed(derive_seed(self.seed, clock, i))
        return compute_gradients(tower, data, labels)

    def gradients(self, data: Tensor, labels: Tensor, clock: int) -> tuple[float, float, dict[str, np.ndarray]]:
        """Combined loss, accuracy and gradient for one batch, without updating parameters."""
        if not self.parallel:
            self.brain.reseed(derive_seed(self.seed, clock, 0))
            r = compute_gradients(self.brain, data, labels)
            return r.loss, r.accuracy, r.grads
        parts = split_batch(data, labels, self.num_towers)
        if self.num_towers == 1:
            results = [self._run_tower(0, *parts[0], clock)]
        else:
            if self._pool is None:
                self._pool = ThreadPoolExecutor(max_workers=self.num_towers, thread_name_prefix="tower")
            futures = [self._pool.submit(self._run_tower, i, d, l, clock) for i, (d, l) in enumerate(parts)]
            results = [f.result() for f in futures]  # barrier
        total = data.shape[0]
        weights = [r.size / total for r in results]
        grads = {name: sum(w * r.grads[name] for w, r in zip(weights, results)) for name in results[0].grads}
        loss = float(sum(w * r.loss for w, r in zip(weights, results)))
        accuracy = float(sum(w * r.accuracy for w, r in zip(weights, results)))
        master_states = self.brain.state_tensors()
        for name, t in self.towers[0].state_tensors().items():
            master_states[name].assign(t.data)
        return loss, accuracy, grads

    def step(self, data: Tensor, labels: Tensor, kongfu: KongFu, clock: int) -> StepResult:
        """One optimizer application on the master parameters."""
        loss, accuracy, grads = self.gradients(data, labels, clock)
        lr = kongfu.step(self.brain.params(), grads, clock)
        self.generation += 1
        if self.parallel:
            self.sync_replicas()
        return StepResult(loss, accuracy, grads, lr)

    parallel_step = step
