import struct

import numpy as np
import pytest

from akid.blocks import ConfigError, SetupError
from akid.kid import CheckpointError, Kid, read_checkpoint, write_checkpoint
from akid.kongfu import MomentumKongFu
from akid.models import LeNet
from akid.sensor import FeedSensor, SyntheticSource
from akid.tensor import ShapeError


def make_kid(tmp_path=None, seed=0, steps=12, engine=None, channels=(4, 8), **kw):
    src = SyntheticSource(num_train=96, num_val=32, seed=0)
    return Kid(
        FeedSensor(source_in=src, batch_size=16, seed=seed),
        LeNet(name="brain", seed=seed, channels=channels, hidden=16),
        MomentumKongFu(lr=0.05),
        engine=engine,
        max_steps=steps,
        val_interval=5,
        log_dir=tmp_path,
        seed=seed,
        **kw,
    )


def test_budget_arguments():
    src = SyntheticSource(num_train=10, num_val=0)
    sensor = FeedSensor(source_in=src, batch_size=4)
    with pytest.raises(ConfigError):
        Kid(sensor, LeNet(), MomentumKongFu())
    with pytest.raises(ConfigError):
        Kid(sensor, LeNet(), MomentumKongFu(), max_steps=1, max_epoch=1)
    kid = Kid(sensor, LeNet(), MomentumKongFu(), max_epoch=2)
    sensor.setup()
    assert kid.total_steps == 6


def test_practice_before_setup():
    with pytest.raises(SetupError):
        make_kid().practice()


def test_practice_records_summaries(tmp_path):
    kid = make_kid(tmp_path)
    kid.setup()
    metrics = kid.practice()
    assert kid.clock == 12 and metrics["clock"] == 12
    assert 0.0 <= metrics["val_accuracy"] <= 1.0
    tags = {t for _, t, _ in kid.sink.scalars}
    assert tags == {"train/loss", "train/accuracy", "train/lr", "val/loss", "val/accuracy"}
    assert [c for c, _ in kid.sink.scalar_series("val/accuracy")] == [5, 10, 12]
    dist_clocks = sorted({row[0] for row in kid.sink.distributions})
    assert dist_clocks == [0, 5, 10, 12]
    kid.sink.close()
    assert (tmp_path / "scalars.csv").read_text().startswith("clock,tag,value\n")


def test_validation_does_not_touch_training_state():
    kid = make_kid()
    kid.setup()
    before = {k: v.data.copy() for k, v in kid.brain.params().items()}
    kid.validate()
    for k, v in kid.brain.params().items():
        np.testing.assert_array_equal(v.data, before[k])


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    kid = make_kid()
    kid.setup()
    kid.practice()
    path = kid.save_checkpoint(tmp_path / "a.akck")
    fresh = make_kid(seed=9)
    fresh.setup()
    fresh.load_checkpoint(path)
    assert fresh.clock == 12
    for name, t in kid.brain.params().items():
        np.testing.assert_array_equal(fresh.brain.params()[name].data, t.data)
    fresh.save_checkpoint(tmp_path / "b.akck")
    assert (tmp_path / "a.akck").read_bytes() == (tmp_path / "b.akck").read_bytes()


def test_resume_matches_uninterrupted_run(tmp_path):
    straight = make_kid(steps=12)
    straight.setup()
    straight.practice()

    first = make_kid(steps=7)
    first.setup()
    first.practice()
    first.save_checkpoint(tmp_path / "mid.akck")
    second = make_kid(steps=12, seed=0)
    second.setup()
    second.load_checkpoint(tmp_path / "mid.akck")
    second.practice()
    for name, t in straight.brain.params().items():
        np.testing.assert_array_equal(second.brain.params()[name].data, t.data)


def test_checkpoint_format(tmp_path):
    entries = {"a/b": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.array(3.0, dtype=np.float32)}
    write_checkpoint(tmp_path / "c", entries)
    raw = (tmp_path / "c").read_bytes()
    assert raw[:4] == b"AKCK"
    assert struct.unpack_from("<II", raw, 4) == (1, 2)
    assert struct.unpack_from("<H", raw, 12) == (3,)
    assert raw[14:17] == b"a/b"
    assert struct.unpack_from("<BII", raw, 17) == (2, 2, 3)
    back = read_checkpoint(tmp_path / "c")
    np.testing.assert_array_equal(back["a/b"], entries["a/b"])
    assert back["s"].shape == ()


def test_checkpoint_errors(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "bad")
    write_checkpoint(tmp_path / "ok", {"w": np.zeros((4, 4), dtype=np.float32)})
    raw = (tmp_path / "ok").read_bytes()
    (tmp_path / "short").write_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(tmp_path / "short")


def test_checkpoint_shape_mismatch_names_tensor(tmp_path):
    kid = make_kid(channels=(4, 8))
    kid.setup()
    kid.save_checkpoint(tmp_path / "c.akck")
    other = make_kid(channels=(6, 8))
    other.setup()
    with pytest.raises(ShapeError, match="brain/conv1/weights"):
        other.load_checkpoint(tmp_path / "c.akck")


def test_data_parallel_kid_runs():
    kid = make_kid(engine={"num_towers": 2}, steps=4)
    kid.setup()
    metrics = kid.practice()
    assert metrics["clock"] == 4
