"""The Kid: wires a sensor, a brain and a kongfu together and drives the clock."""
from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from akid.blocks import ConfigError, SetupError
from akid.brain import Brain
from akid.engine import Engine, EngineConfig
from akid.kongfu import KongFu
from akid.observer import SummarySink
from akid.sensor import FeedSensor
from akid.tensor import ShapeError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"AKCK"
CHECKPOINT_VERSION = 1
_VELOCITY_PREFIX = "kongfu/velocity/"
_CLOCK_ENTRY = "kid/clock"


class CheckpointError(ValueError):
    pass


def write_checkpoint(path, entries: Mapping[str, np.ndarray]) -> None:
    """Binary checkpoint: ``AKCK``, u32 version, u32 count, then per entry
    u16 name length, UTF-8 name, u8 rank, u32 extents, float32 values (all little-endian).
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(entries))]
    for name, value in entries.items():
        arr = np.asarray(value)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos, entries = 12, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if pos + size > len(raw):
                raise CheckpointError(f"checkpoint truncated inside entry {name!r}")
            entries[name] = np.frombuffer(raw[pos:pos + size], dtype="<f4").reshape(shape).astype(np.float32)
            pos += size
    except struct.error as e:
        raise CheckpointError(f"checkpoint truncated: {e}") from None
    return entries


class Kid:
    """Training driver.

    Exactly one of ``max_steps`` / ``max_epoch`` must be given.  The clock
    advances by one per optimizer application; validation runs every
    ``val_interval`` steps and once more at the end, on an inference copy of
    the brain.
    """

    def __init__(self, sensor: FeedSensor, brain: Brain, kongfu: KongFu, engine=None, max_steps=None,
                 max_epoch=None, val_interval=50, log_dir=None, seed=0, summary_interval=None):
        if brain is None:
            raise ConfigError("Kid needs a brain")
        if sensor is None:
            raise ConfigError("Kid needs a sensor")
        if kongfu is None:
            raise ConfigError("Kid needs a kongfu")
        if (max_steps is None) == (max_epoch is None):
            raise ConfigError("give exactly one of max_steps and max_epoch")
        self.sensor = sensor
        self.brain = brain
        self.kongfu = kongfu
        self.engine_config = EngineConfig.parse(engine)
        self.max_steps = max_steps
        self.max_epoch = max_epoch
        self.val_interval = int(val_interval)
        if self.val_interval < 1:
            raise ConfigError("val_interval must be >= 1")
        self.summary_interval = int(summary_interval or self.val_interval)
        self.log_dir = Path(log_dir) if log_dir is not None else None
        self.seed = seed
        self.clock = 0
        self.engine: Engine | None = None
        self.sink: SummarySink | None = None
        self.is_setup = False
        self.history: list[dict] = []
        self._dist_clock: int | None = None

    @property
    def total_steps(self) -> int:
        if self.max_steps is not None:
            return int(self.max_steps)
        return self.sensor.batches_per_epoch * int(self.max_epoch)

    def setup(self) -> None:
        if self.is_setup:
            raise SetupError("kid is already set up")
        if not self.sensor.is_setup:
            self.sensor.setup()
        if not self.brain.is_setup:
            data, labels = self.sensor.sample_batch()
            self.brain.setup([data, labels])
        self.engine = Engine(self.brain, self.engine_config, seed=self.seed)
        self.engine.setup()
        self.sink = SummarySink(self.log_dir)
        self.is_setup = True

    def _record_distributions(self):
        self._dist_clock = self.clock
        for name, p in self.brain.params().items():
            self.sink.record_distribution(self.clock, name, p)

    def practice(self) -> dict:
        """Train until the step budget is spent; returns final train and validation metrics."""
        if not self.is_setup:
            raise SetupError("call setup() before practice()")
        self.sensor.seek(self.clock)
        last = {}
        has_val = self.sensor.source.num_val > 0
        if self.clock == 0:
            self._record_distributions()
        while self.clock < self.total_steps:
            data, labels = self.sensor.next_batch("train")
            result = self.engine.step(data, labels, self.kongfu, self.clock)
            self.clock += 1
            self.sink.record_scalar(self.clock, "train/loss", result.loss)
            self.sink.record_scalar(self.clock, "train/accuracy", result.accuracy)
            self.sink.record_scalar(self.clock, "train/lr", result.lr)
            last = {"clock": self.clock, "train_loss": result.loss, "train_accuracy": result.accuracy}
            if self.clock % self.summary_interval == 0:
                self._record_distributions()
            if has_val and self.clock % self.val_interval == 0:
                last.update(self._validate_and_record())
            self.history.append(dict(last))
        if has_val and (not self.history or "val_loss" not in self.history[-1]):
            last.update(self._validate_and_record())
        if self._dist_clock != self.clock:
            self._record_distributions()
        if self.engine is not None:
            self.engine.close()
        return last

    def _validate_and_record(self) -> dict:
        val_loss, val_acc = self.validate()
        self.sink.record_scalar(self.clock, "val/loss", val_loss)
        self.sink.record_scalar(self.clock, "val/accuracy", val_acc)
        log.info("step %d: val loss %.4f, accuracy %.4f", self.clock, val_loss, val_acc)
        return {"val_loss": val_loss, "val_accuracy": val_acc}

    def validate(self) -> tuple[float, float]:
        """Loss and accuracy over the whole validation split, on an inference copy."""
        if self.sensor.source.num_val == 0:
            raise ConfigError("validation split is empty")
        val_brain = self.brain.get_val_copy()
        total = loss_sum = correct = 0.0
        for data, labels in self.sensor.val_batches():
            out = val_brain.forward([data, labels])
            n = data.shape[0]
            loss_sum += float(out.loss.item()) * n
            correct += float(out.eval[0].item()) * n
            total += n
        return loss_sum / total, correct / total

    # checkpoints --------------------------------------------------------------

    def checkpoint_entries(self) -> dict[str, np.ndarray]:
        entries = {name: t.data for name, t in self.brain.params().items()}
        entries.update({name: t.data for name, t in self.brain.state_tensors().items()})
        entries.update({_VELOCITY_PREFIX + k: v for k, v in self.kongfu.state_dict().items()})
        if self.clock >= 1 << 24:
            raise CheckpointError("clock too large to store exactly as float32")
        entries[_CLOCK_ENTRY] = np.array(self.clock, dtype=np.float32)
        return entries

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_checkpoint(path, self.checkpoint_entries())
        return path

    def load_checkpoint(self, path) -> None:
        entries = read_checkpoint(path)
        tensors = dict(self.brain.params())
        tensors.update(self.brain.state_tensors())
        missing = set(tensors) - set(entries)
        if missing:
            raise CheckpointError(f"checkpoint lacks {sorted(missing)}")
        for name, t in tensors.items():
            if entries[name].shape != t.shape:
                raise ShapeError(f"checkpoint tensor {name} has shape {entries[name].shape}, model expects {t.shape}")
        for name, t in tensors.items():
            t.assign(entries[name])
        self.kongfu.load_state_dict(
            {k[len(_VELOCITY_PREFIX):]: v for k, v in entries.items() if k.startswith(_VELOCITY_PREFIX)}
        )
        self.clock = int(entries.get(_CLOCK_ENTRY, np.float32(0)))
        if self.engine is not None and self.engine.parallel:
            self.engine.sync_replicas()
