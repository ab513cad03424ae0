"""Dense tensors and the reverse-mode tape.

Tensors wrap a read-only numpy array.  Kernels in :mod:`akid.ops` build new
tensors and, when a :class:`Tape` is active on the calling thread, append an
:class:`OpRecord` holding the vector-Jacobian product of the op.  Parameters
are the only tensors whose storage changes, and they change by swapping in a
fresh array (:meth:`Tensor.assign`), never by writing in place.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_default_dtype = np.dtype(np.float32)
_local = threading.local()


class ShapeError(ValueError):
    """Raised when a kernel or block receives tensors of incompatible shape."""


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the global float precision, e.g. to float64 for gradient checks."""
    old = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """An immutable n-d array, optionally marked as a trainable parameter."""

    __slots__ = ("_data", "requires_grad", "name", "version", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self._data = _freeze(_as_array(data, dtype))
        self.requires_grad = requires_grad
        self.name = name
        self.version = 0

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self):
        return self._data.item()

    def assign(self, value) -> None:
        """Replace the stored values; shape must not change."""
        arr = np.array(value, dtype=self._data.dtype)
        if arr.shape != self._data.shape:
            raise ShapeError(
                f"cannot assign shape {arr.shape} to tensor {self.name or ''} of shape {self._data.shape}"
            )
        self._data = _freeze(arr)
        self.version += 1

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        from akid import ops
        return ops.add(self, other)


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.array(data, dtype=dtype)
    arr = np.array(data)
    if arr.dtype.kind in "iub":
        return arr
    return arr.astype(_default_dtype)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class OpRecord:
    """One recorded kernel application."""

    name: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]

    def backward(self, upstream: np.ndarray) -> list[np.ndarray | None]:
        """Gradients with respect to each input, given the output's upstream gradient."""
        grads = list(self.vjp(upstream))
        if len(grads) != len(self.inputs):
            raise RuntimeError(f"{self.name}: vjp returned {len(grads)} grads for {len(self.inputs)} inputs")
        return grads


class Tape:
    """Records op applications on the current thread for reverse replay.

    Use as a context manager; tapes nest, and the innermost one records.
    """

    def __init__(self):
        self.records: list[OpRecord] = []
        self._tracked: set[int] = set()

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)

    def is_tracked(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, name, output, inputs, vjp) -> None:
        if not any(self.is_tracked(t) for t in inputs):
            return
        self._tracked.add(id(output))
        self.records.append(OpRecord(name, output, tuple(inputs), vjp))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Replay the tape backwards from ``target``; returns d target / d source for each source.

        Gradients of a tensor consumed by several ops are summed.
        """
        grads: dict[int, np.ndarray] = {id(target): np.ones(target.shape, dtype=target.dtype)}
        for rec in reversed(self.records):
            g = grads.get(id(rec.output))
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not self.is_tracked(inp):
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else np.asarray(gi, dtype=inp.dtype)
        out = []
        for s in sources:
            g = grads.get(id(s))
            out.append(np.zeros(s.shape, dtype=s.dtype) if g is None else g.reshape(s.shape))
        return out


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def record(name, output: Tensor, inputs, vjp) -> Tensor:
    tape = current_tape()
    if tape is not None:
        tape.record(name, output, inputs, vjp)
    return output
