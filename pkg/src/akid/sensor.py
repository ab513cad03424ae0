"""Data pipeline: sources, augmentation ("jokers") and the batching sensor.

IDX files (the MNIST distribution format) are read and written bit-exactly;
``.gz`` paths are handled transparently.
"""
from __future__ import annotations

import gzip
import hashlib
import logging
import os
import shutil
import struct
import tempfile
import urllib.request
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from akid.blocks import ConfigError
from akid.rng import Pcg32, derive_seed
from akid.tensor import Tensor, get_default_dtype

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("="): k for k, v in _IDX_DTYPES.items()}

MNIST_URL = "http://yann.lecun.com/exdb/mnist/"
MNIST_FILES = {
    "images": "train-images-idx3-ubyte.gz",
    "labels": "train-labels-idx1-ubyte.gz",
}
MNIST_MD5 = {
    "train-images-idx3-ubyte.gz": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte.gz": "d53e105ee54ea40749a09fcbcd1e9432",
}


class IdxFormatError(ValueError):
    pass


class DatasetMissingError(FileNotFoundError):
    pass


class IntegrityError(IOError):
    pass


def data_root() -> Path:
    """Default dataset cache root: ``$AKID_DATA_PATH`` or ``~/.akid/data``."""
    return Path(os.environ.get("AKID_DATA_PATH", Path.home() / ".akid" / "data"))


def _open(path, mode):
    path = str(path)
    return gzip.open(path, mode) if path.endswith(".gz") else open(path, mode)


def parse_idx(raw: bytes) -> np.ndarray:
    if len(raw) < 4:
        raise IdxFormatError("file shorter than the IDX magic number")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_DTYPES or ndim == 0:
        raise IdxFormatError(f"bad IDX magic number 0x{struct.unpack('>I', raw[:4])[0]:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = raw[header:]
    if len(payload) != expected:
        raise IdxFormatError(
            f"IDX payload is {len(payload)} bytes but dims {list(dims)} declare {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))


def load_idx(path) -> np.ndarray:
    """Read an IDX file: images (magic 2051) give [N, H, W], labels (magic 2049) give [N]."""
    with _open(path, "rb") as f:
        return parse_idx(f.read())


def encode_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    native = array.dtype.newbyteorder("=")
    if native not in _IDX_CODES:
        raise IdxFormatError(f"dtype {array.dtype} has no IDX encoding")
    code = _IDX_CODES[native]
    head = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    return head + array.astype(_IDX_DTYPES[code]).tobytes()


def write_idx(array: np.ndarray, path) -> None:
    data = encode_idx(array)
    if str(path).endswith(".gz"):
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
            f.write(data)
    else:
        with open(path, "wb") as f:
            f.write(data)


def md5sum(path) -> str:
    h = hashlib.md5()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# sources --------------------------------------------------------------------


class Source:
    """Holds a dataset split into the first ``num_train`` and next ``num_val`` examples.

    Preprocessing: ``scale`` divides by 255, then ``center`` subtracts the mean
    training image (the same mean is applied to validation).
    """

    def __init__(self, name="source", num_train=None, num_val=0, center=False, scale=False):
        self.name = name
        self.num_train = num_train
        self.num_val = int(num_val)
        self.center = center
        self.scale = scale
        self.train_images: np.ndarray | None = None
        self.train_labels: np.ndarray | None = None
        self.val_images: np.ndarray | None = None
        self.val_labels: np.ndarray | None = None
        self.mean_image: np.ndarray | None = None

    def _load(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def setup(self) -> None:
        images, labels = self._load()
        if images.ndim == 3:
            images = images[..., None]
        total = images.shape[0]
        if labels.shape[0] != total:
            raise ConfigError(f"{self.name}: {total} images but {labels.shape[0]} labels")
        num_train = total - self.num_val if self.num_train is None else int(self.num_train)
        if num_train <= 0 or num_train + self.num_val > total:
            raise ConfigError(
                f"{self.name}: num_train={num_train} + num_val={self.num_val} exceeds {total} examples"
            )
        self.num_train = num_train
        train = images[:num_train]
        val = images[num_train:num_train + self.num_val]
        self.train_images, self.val_images = self.preprocess(train, val)
        self.train_labels = labels[:num_train].astype(np.int64)
        self.val_labels = labels[num_train:num_train + self.num_val].astype(np.int64)

    def preprocess(self, train: np.ndarray, val: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        dtype = get_default_dtype()
        train = train.astype(np.float64)
        val = val.astype(np.float64)
        if self.scale:
            train, val = train / 255.0, val / 255.0
        if self.center:
            self.mean_image = train.mean(axis=0)
            train, val = train - self.mean_image, val - self.mean_image
        return train.astype(dtype), val.astype(dtype)


class ArraySource(Source):
    """Source over in-memory arrays."""

    def __init__(self, images, labels, **kw):
        super().__init__(**kw)
        self._images = np.asarray(images)
        self._labels = np.asarray(labels)

    def _load(self):
        return self._images, self._labels


class SyntheticSource(Source):
    """Seeded 8x8 single-channel images, one class per pair of Gaussian blobs.

    Each class owns two blob centres; an example is the class's blob pair
    (with jittered amplitude) plus pixel noise, scaled to [0, 255].
    """

    def __init__(self, name="source", num_train=2000, num_val=500, class_num=10, size=8, noise=0.15, seed=0,
                 center=True, scale=True):
        super().__init__(name=name, num_train=num_train, num_val=num_val, center=center, scale=scale)
        self.class_num = class_num
        self.size = size
        self.noise = noise
        self.seed = seed

    def _load(self):
        rng = Pcg32(self.seed, stream=11)
        n = int(self.num_train) + self.num_val
        yy, xx = np.mgrid[0:self.size, 0:self.size].astype(np.float64)
        centres = rng.uniform((self.class_num, 2, 2), 0.5, self.size - 1.5)
        templates = np.zeros((self.class_num, self.size, self.size))
        for c in range(self.class_num):
            for (cy, cx) in centres[c]:
                templates[c] += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 2.0)
        labels = (np.arange(n) % self.class_num)[rng.permutation(n)]
        amp = rng.uniform((n, 1, 1), 0.7, 1.3)
        images = templates[labels] * amp + rng.normal((n, self.size, self.size), 0.0, self.noise)
        images = np.clip(images, 0.0, 1.0) * 255.0
        return images, labels


class MNISTFeedSource(Source):
    """MNIST training images from an IDX cache in ``work_dir``, downloaded when missing."""

    def __init__(self, name="source", url=MNIST_URL, work_dir=None, center=False, scale=False,
                 num_train=50000, num_val=10000, offline=False, checksums=None):
        super().__init__(name=name, num_train=num_train, num_val=num_val, center=center, scale=scale)
        self.url = url
        self.work_dir = Path(work_dir) if work_dir is not None else data_root() / "mnist"
        self.offline = offline
        self.checksums = MNIST_MD5 if checksums is None else checksums

    def _load(self):
        fetch_remote(self)
        images = load_idx(self.work_dir / MNIST_FILES["images"])
        labels = load_idx(self.work_dir / MNIST_FILES["labels"])
        return images, labels


def fetch_remote(source: MNISTFeedSource, opener=urllib.request.urlopen) -> list[Path]:
    """Download each missing file into ``work_dir``; cached files are used as-is.

    Fresh downloads are verified against ``source.checksums`` (md5) when a
    checksum is known.  In offline mode a missing file raises
    :class:`DatasetMissingError`.
    """
    work_dir = Path(source.work_dir)
    fetched = []
    for fname in MNIST_FILES.values():
        target = work_dir / fname
        if target.exists():
            continue
        if source.offline:
            raise DatasetMissingError(f"dataset missing: {target} (offline mode, no download attempted)")
        work_dir.mkdir(parents=True, exist_ok=True)
        url = source.url.rstrip("/") + "/" + fname
        log.info("downloading %s", url)
        with tempfile.NamedTemporaryFile(dir=work_dir, delete=False) as tmp:
            with opener(url) as resp:
                shutil.copyfileobj(resp, tmp)
        expected = source.checksums.get(fname)
        if expected is not None and md5sum(tmp.name) != expected:
            os.unlink(tmp.name)
            raise IntegrityError(f"checksum mismatch for {fname} from {url}")
        os.replace(tmp.name, target)
        fetched.append(target)
    return fetched


# augmentation ---------------------------------------------------------------


class Joker:
    """Ordered augmentation steps applied to training batches.

    Steps: ``{"type": "crop", "height": h, "width": w}`` (uniform random
    window per example) and ``{"type": "flip", "probability": p}``
    (mirror the width axis).  For validation, crops become centre crops so
    shapes agree and no randomness is used.
    """

    def __init__(self, steps: Sequence[dict] = ()):
        self.steps = []
        for s in steps:
            s = dict(s)
            kind = s.get("type")
            allowed = {"crop": {"type", "height", "width"}, "flip": {"type", "probability"}}.get(kind)
            if allowed is None:
                raise ConfigError(f"unknown joker type {kind!r}")
            unknown = set(s) - allowed
            if unknown:
                raise ConfigError(f"joker {kind}: unknown keys {sorted(unknown)}")
            self.steps.append(s)

    def apply(self, batch: np.ndarray, rng: Pcg32) -> np.ndarray:
        for s in self.steps:
            if s["type"] == "crop":
                batch = random_crop(batch, int(s["height"]), int(s["width"]), rng)
            else:
                batch = random_flip(batch, float(s.get("probability", 0.5)), rng)
        return batch

    def apply_eval(self, batch: np.ndarray) -> np.ndarray:
        for s in self.steps:
            if s["type"] == "crop":
                batch = center_crop(batch, int(s["height"]), int(s["width"]))
        return batch


def apply_jokers(joker: Joker, batch: np.ndarray, rng: Pcg32) -> np.ndarray:
    return joker.apply(batch, rng)


def random_crop(batch, height, width, rng: Pcg32):
    n, h, w = batch.shape[:3]
    if height > h or width > w:
        raise ConfigError(f"crop {height}x{width} larger than image {h}x{w}")
    tops = [rng.bounded(h - height + 1) for _ in range(n)]
    lefts = [rng.bounded(w - width + 1) for _ in range(n)]
    return np.stack([batch[i, t:t + height, l:l + width] for i, (t, l) in enumerate(zip(tops, lefts))])


def center_crop(batch, height, width):
    h, w = batch.shape[1:3]
    t, l = (h - height) // 2, (w - width) // 2
    return batch[:, t:t + height, l:l + width]


def random_flip(batch, probability, rng: Pcg32):
    flip = rng.uniform(batch.shape[0]) < probability
    out = batch.copy()
    out[flip] = out[flip][:, :, ::-1]
    return out


# sensor ---------------------------------------------------------------------


class FeedSensor:
    """Batches a source.  Training batches walk a fresh seeded permutation per
    epoch; the last partial batch of an epoch is kept.
    """

    def __init__(self, name="sensor", source_in: Source | None = None, batch_size=64, seed=0, jokers=None):
        if source_in is None:
            raise ConfigError("FeedSensor needs a source")
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.name = name
        self.source = source_in
        self.batch_size = int(batch_size)
        self.seed = seed
        self.joker = jokers if isinstance(jokers, Joker) or jokers is None else Joker(jokers)
        self.cursor = 0
        self._perm_cache: tuple[int, np.ndarray] | None = None
        self._last: tuple[Tensor, Tensor] | None = None
        self.is_setup = False

    def setup(self) -> None:
        self.source.setup()
        self.is_setup = True

    @property
    def num_train(self) -> int:
        return int(self.source.num_train)

    @property
    def batches_per_epoch(self) -> int:
        return -(-self.num_train // self.batch_size)

    def permutation(self, epoch: int) -> np.ndarray:
        if self._perm_cache is None or self._perm_cache[0] != epoch:
            self._perm_cache = (epoch, Pcg32(derive_seed(self.seed, epoch), stream=3).permutation(self.num_train))
        return self._perm_cache[1]

    def seek(self, step: int) -> None:
        """Position the training cursor so the next batch is the one for ``step``."""
        self.cursor = int(step)

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, b = divmod(step, self.batches_per_epoch)
        return self.permutation(epoch)[b * self.batch_size:(b + 1) * self.batch_size]

    def batch_at(self, step: int) -> tuple[Tensor, Tensor]:
        idx = self.batch_indices(step)
        data = self.source.train_images[idx]
        if self.joker is not None:
            epoch, b = divmod(step, self.batches_per_epoch)
            data = self.joker.apply(data, Pcg32(derive_seed(self.seed, epoch, b), stream=5))
        return Tensor(data), Tensor(self.source.train_labels[idx])

    def next_batch(self, split: str = "train") -> tuple[Tensor, Tensor]:
        if split == "train":
            batch = self.batch_at(self.cursor)
            self.cursor += 1
        elif split == "val":
            batch = next(self.val_batches())
        else:
            raise ValueError(f"unknown split {split!r}")
        self._last = batch
        return batch

    def val_batches(self, batch_size: int | None = None) -> Iterator[tuple[Tensor, Tensor]]:
        images, labels = self.source.val_images, self.source.val_labels
        bs = batch_size or self.batch_size
        for start in range(0, images.shape[0], bs):
            data = images[start:start + bs]
            if self.joker is not None:
                data = self.joker.apply_eval(data)
            yield Tensor(data), Tensor(labels[start:start + bs])

    def sample_batch(self) -> tuple[Tensor, Tensor]:
        """The batch for step 0, without moving the cursor (used to set up brains)."""
        return self.batch_at(0)

    def data(self) -> Tensor:
        return (self._last or self.sample_batch())[0]

    def labels(self) -> Tensor:
        return (self._last or self.sample_batch())[1]
