"""Brain: assembles blocks into a DAG and runs it.

Blocks are attached in order.  A block without explicit input references
consumes the outputs of the block attached before it; the first block takes
``system_in`` index 0 (the data tensor).  Explicit references name a block
(or ``system_in``) and a list of output indices.

Feedback connections are references with ``delayed=True``.  They may name
any block in the brain, read the producer's output from the previous forward
pass (zeros on the first pass), and are constants for differentiation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, NamedTuple, Sequence

import numpy as np

from akid import ops
from akid.blocks import INFERENCE, TRAIN, Block, ConfigError, SetupError
from akid.tensor import ShapeError, Tensor

SYSTEM_IN = "system_in"


class DanglingReferenceError(ConfigError):
    """An input reference that cannot be resolved."""


@dataclass(frozen=True)
class InputRef:
    name: str
    idxs: tuple[int, ...] = (0,)
    delayed: bool = False
    shape: tuple[int, ...] | None = field(default=None, compare=False)

    @classmethod
    def parse(cls, ref: Any) -> "InputRef":
        if isinstance(ref, InputRef):
            return ref
        if isinstance(ref, str):
            return cls(ref)
        if isinstance(ref, dict):
            unknown = set(ref) - {"name", "idxs", "delayed", "shape"}
            if unknown:
                raise ConfigError(f"unknown input reference keys {sorted(unknown)}")
            if "name" not in ref:
                raise ConfigError(f"input reference {ref} has no name")
            shape = ref.get("shape")
            return cls(
                str(ref["name"]),
                tuple(int(i) for i in ref.get("idxs", [0])),
                bool(ref.get("delayed", False)),
                tuple(shape) if shape is not None else None,
            )
        raise ConfigError(f"cannot interpret input reference {ref!r}")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"name": self.name, "idxs": list(self.idxs)}
        if self.delayed:
            d["delayed"] = True
        if self.shape is not None:
            d["shape"] = list(self.shape)
        return d


class BrainOutput(NamedTuple):
    loss: Tensor | None
    eval: list[Tensor]
    outputs: dict[str, list[Tensor]]


class Brain(Block):
    """An ordered DAG of blocks with loss, evaluation and parameter access."""

    kind = "brain"

    def __init__(self, name: str = "brain", seed: int = 0, **kw):
        super().__init__(name, **kw)
        self.seed = seed
        self.blocks: list[Block] = []
        self.refs: dict[str, list[InputRef] | None] = {}
        self.index: dict[str, Block] = {}
        self.loss_block: Block | None = None
        self.buffers: dict[tuple[str, int], Tensor] = {}
        self.system_inputs: list[Tensor] = []
        self.values: dict[str, list[Tensor]] = {}
        self.loss: Tensor | None = None
        self.task_loss: Tensor | None = None
        self.eval: list[Tensor] = []

    # assembly -------------------------------------------------------------

    def attach(self, block: Block, inputs: Sequence[Any] | None = None) -> None:
        if self.is_setup:
            raise SetupError(f"brain {self.name!r} is already set up; cannot attach {block.name!r}")
        if block.name == SYSTEM_IN:
            raise ConfigError(f"{SYSTEM_IN!r} is reserved and cannot name a block")
        if block.name in self.index:
            raise ConfigError(f"duplicate block name {block.name!r} in brain {self.name!r}")
        raw = inputs if inputs is not None else block.input_refs
        refs = [InputRef.parse(r) for r in raw] if raw is not None else None
        for ref in refs or []:
            if ref.name == SYSTEM_IN:
                continue
            if ref.delayed:
                continue
            producer = self.index.get(ref.name)
            if producer is None:
                raise DanglingReferenceError(
                    f"block {block.name!r} references unknown block {ref.name!r}"
                )
            for i in ref.idxs:
                if not 0 <= i < producer.num_outputs:
                    raise ConfigError(
                        f"block {block.name!r} references output {i} of {ref.name!r}, "
                        f"which has {producer.num_outputs} output(s)"
                    )
        if block.is_loss:
            if self.loss_block is not None:
                raise ConfigError(f"brain {self.name!r} already has loss block {self.loss_block.name!r}")
            self.loss_block = block
        block.set_scope(f"{self.scope}/{block.name}")
        self.blocks.append(block)
        self.refs[block.name] = refs
        self.index[block.name] = block

    def set_scope(self, scope):
        self.scope = scope
        for b in self.blocks:
            b.set_scope(f"{scope}/{b.name}")

    def reseed(self, seed: int) -> None:
        super().reseed(seed)
        for b in self.blocks:
            b.reseed(seed)

    def _validate_delayed(self):
        for bname, refs in self.refs.items():
            for ref in refs or []:
                if ref.delayed and ref.name != SYSTEM_IN and ref.name not in self.index:
                    raise DanglingReferenceError(f"block {bname!r} has delayed reference to unknown block {ref.name!r}")

    # execution ------------------------------------------------------------

    def _gather(self, i: int, block: Block, values) -> list[Tensor]:
        refs = self.refs[block.name]
        if refs is None:
            if i == 0:
                return [values[SYSTEM_IN][0]]
            return list(values[self.blocks[i - 1].name])
        gathered: list[Tensor] = []
        for ref in refs:
            if ref.delayed:
                for idx in ref.idxs:
                    key = (ref.name, idx)
                    if key not in self.buffers:
                        # producer not yet set up: guess its shape (declared, or the first non-delayed input's)
                        shape = ref.shape
                        if shape is None:
                            shape = self._first_direct_shape(refs, values)
                        self.buffers[key] = Tensor(np.zeros(shape))
                        self._guessed[key] = tuple(shape)
                    gathered.append(self.buffers[key])
                continue
            src = values.get(ref.name)
            if src is None:
                raise DanglingReferenceError(f"block {block.name!r}: {ref.name!r} has not produced outputs")
            for idx in ref.idxs:
                if not 0 <= idx < len(src):
                    raise ConfigError(f"block {block.name!r}: {ref.name!r} has no output {idx}")
                gathered.append(src[idx])
        return gathered

    def _first_direct_shape(self, refs, values):
        for ref in refs:
            if not ref.delayed:
                return values[ref.name][ref.idxs[0]].shape
        raise ConfigError("a delayed reference to a block not yet set up needs an explicit shape")

    def setup(self, inputs: Sequence[Tensor]) -> list[Tensor]:
        if self.is_setup:
            raise SetupError(f"brain {self.name!r} is already set up")
        inputs = list(inputs)
        if not inputs:
            raise ShapeError(f"brain {self.name!r} needs at least one input tensor")
        if not self.blocks:
            raise ConfigError(f"brain {self.name!r} has no blocks")
        self._validate_delayed()
        self.in_shapes = [t.shape for t in inputs]
        self.buffers = {}
        self._guessed: dict[tuple[str, int], tuple] = {}
        values = {SYSTEM_IN: inputs}
        for i, block in enumerate(self.blocks):
            for ref in self.refs[block.name] or []:
                if ref.delayed and ref.name in values:
                    for idx in ref.idxs:
                        self.buffers.setdefault((ref.name, idx), Tensor(np.zeros(values[ref.name][idx].shape)))
            block.seed = self.seed
            block.reseed(self.seed)
            values[block.name] = block.setup(self._gather(i, block, values))
        for key, shape in self._guessed.items():
            actual = inputs[key[1]].shape if key[0] == SYSTEM_IN else self.index[key[0]].out_shapes[key[1]]
            if tuple(actual) != shape:
                raise ShapeError(f"delayed reference to {key[0]}:{key[1]} assumed shape {shape}, producer emits {actual}")
        self._reset_buffers(values)
        self.is_setup = True
        self.system_inputs = inputs
        self.values = values
        self._finish(values)
        self.out_shapes = [t.shape for t in self._data_outputs(values)]
        return self._data_outputs(values)

    def _reset_buffers(self, values):
        for key in list(self.buffers):
            name, idx = key
            shape = values[name][idx].shape
            self.buffers[key] = Tensor(np.zeros(shape))

    def _data_outputs(self, values):
        return list(values[self.blocks[-1].name])

    def _run(self, inputs: Sequence[Tensor], mode: str) -> dict[str, list[Tensor]]:
        if not self.is_setup:
            raise SetupError(f"brain {self.name!r} used before setup")
        inputs = list(inputs)
        if not inputs:
            raise ShapeError(f"brain {self.name!r} needs at least one input tensor")
        values = {SYSTEM_IN: inputs}
        for i, block in enumerate(self.blocks):
            values[block.name] = block.process(self._gather(i, block, values), mode)
        for name, idx in self.buffers:
            # one-step delay; stored as a constant so no gradient flows back
            self.buffers[(name, idx)] = Tensor(values[name][idx].data)
        self.system_inputs = inputs
        self.values = values
        return values

    def _finish(self, values):
        self.task_loss = values[self.loss_block.name][0] if self.loss_block is not None else None
        self.eval = [values[self.loss_block.name][1]] if self.loss_block is not None else []
        loss = self.task_loss
        if loss is not None:
            for term in self.weight_decay_losses():
                loss = ops.add(loss, term)
        self.loss = loss

    def _forward(self, inputs, mode):
        values = self._run(inputs, mode)
        return self._data_outputs(values)

    def process(self, inputs, mode=None):
        outs = super().process(inputs, mode)
        self._finish(self.values)
        return outs

    def forward(self, inputs: Sequence[Tensor], mode: str | None = None) -> BrainOutput:
        """Run every block; returns total loss (task + weight decay), eval tensors, and all block outputs."""
        self.process(inputs, mode)
        return BrainOutput(self.loss, self.eval, self.values)

    # access ---------------------------------------------------------------

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for b in self.blocks:
            out.update(b.params())
        return out

    def state_tensors(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for b in self.blocks:
            out.update(b.state_tensors())
        return out

    def weight_decay_losses(self) -> list[Tensor]:
        return [l for b in self.blocks for l in b.weight_decay_losses()]

    def get(self, name: str) -> Block:
        try:
            return self.index[name]
        except KeyError:
            raise KeyError(f"brain {self.name!r} has no block named {name!r}") from None

    def data(self, name: str, idx: int = 0) -> Tensor:
        """Latest output ``idx`` of block ``name`` (or of ``system_in``)."""
        if name != SYSTEM_IN:
            self.get(name)
        if name not in self.values:
            raise KeyError(f"block {name!r} has not produced outputs yet")
        outs = self.values[name]
        if not 0 <= idx < len(outs):
            raise KeyError(f"block {name!r} has no output {idx}")
        return outs[idx]

    def param(self, full_name: str) -> Tensor:
        params = self.params()
        if full_name not in params:
            raise KeyError(f"no parameter named {full_name!r}")
        return params[full_name]

    def edges(self) -> list[tuple[str, str, bool]]:
        """(producer, consumer, delayed) per input reference, with implicit chaining made explicit."""
        out = []
        for i, b in enumerate(self.blocks):
            refs = self.refs[b.name]
            if refs is None:
                out.append((SYSTEM_IN if i == 0 else self.blocks[i - 1].name, b.name, False))
            else:
                out.extend((r.name, b.name, r.delayed) for r in refs)
        return out

    # copies ---------------------------------------------------------------

    def _copy_with(self, blocks: list[Block], mode: str) -> "Brain":
        twin = object.__new__(type(self))
        twin.__dict__.update(self.__dict__)
        twin.mode = mode
        twin.blocks = blocks
        twin.index = {b.name: b for b in blocks}
        twin.loss_block = twin.index[self.loss_block.name] if self.loss_block is not None else None
        twin.refs = dict(self.refs)
        twin.buffers = dict(self.buffers)
        twin.values = {}
        twin.loss = twin.task_loss = None
        twin.eval = []
        return twin

    def get_val_copy(self) -> "Brain":
        """Inference-mode copy sharing all parameters and states; delayed buffers are copied."""
        return self._copy_with([b.clone_for_validation() for b in self.blocks], INFERENCE)

    def clone_for_validation(self) -> "Brain":
        return self.get_val_copy()

    def replicate(self) -> "Brain":
        """Copy with private parameter storage (engine towers)."""
        return self._copy_with([b.replicate() for b in self.blocks], self.mode)


__all__ = ["Brain", "BrainOutput", "InputRef", "SYSTEM_IN", "DanglingReferenceError", "TRAIN", "INFERENCE"]
