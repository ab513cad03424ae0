"""Blocks: named, stateful processing units, and the layer library.

A block is created with its configuration, set up once on concrete input
tensors (which allocates its variables and fixes its output shapes), and then
run on new inputs with :meth:`Block.process`.  Variables are addressed by the
hierarchical name ``<scope>/<var>`` where the scope is the chain of parent
names, e.g. ``brain/conv1/weights``.
"""
from __future__ import annotations

import copy
import inspect
import math
import zlib
from typing import Any, Sequence

import numpy as np

from akid import ops
from akid.rng import Pcg32, derive_seed
from akid.tensor import ShapeError, Tensor, get_default_dtype

TRAIN = "train"
INFERENCE = "inference"


class ConfigError(ValueError):
    """Invalid block, brain, or experiment configuration."""


class SetupError(RuntimeError):
    """Block lifecycle violation (double setup, forward before setup)."""


def _pair(v, what: str) -> tuple[int, int]:
    """Accept [h, w] or the NHWC form [1, h, w, 1]."""
    if not isinstance(v, (list, tuple)):
        raise ConfigError(f"{what}: expected [h, w] or [1, h, w, 1], got {v!r}")
    v = list(v)
    if len(v) == 4:
        if v[0] != 1 or v[3] != 1:
            raise ConfigError(f"{what}: 4-element form must be [1, h, w, 1], got {v}")
        v = v[1:3]
    if len(v) != 2 or any(int(e) < 1 for e in v):
        raise ConfigError(f"{what}: expected two positive extents, got {v}")
    return int(v[0]), int(v[1])


def _name_seed(seed: int, name: str, salt: int = 0) -> int:
    return derive_seed(seed, zlib.crc32(name.encode()), salt)


class Block:
    """Base class of everything that processes tensors.

    Subclasses implement ``_build`` (allocate variables from input shapes) and
    ``_forward`` (compute outputs).  ``num_outputs`` bounds the output indices
    other blocks may reference.
    """

    kind = "block"
    num_outputs = 1
    is_loss = False

    def __init__(self, name: str, inputs: Sequence[Any] | None = None, mode: str = TRAIN):
        if not isinstance(name, str) or not name:
            raise ConfigError("block name must be a non-empty string")
        if "/" in name:
            raise ConfigError(f"block name {name!r} may not contain '/'")
        if mode not in (TRAIN, INFERENCE):
            raise ConfigError(f"unknown mode {mode!r}")
        self.name = name
        self.input_refs = inputs
        self.mode = mode
        self.scope = name
        self.seed = 0
        self.is_setup = False
        self.variables: dict[str, Tensor] = {}
        self.states: dict[str, Tensor] = {}
        self.weight_names: list[str] = []
        self.outputs: list[Tensor] = []
        self.in_shapes: list[tuple] = []
        self.out_shapes: list[tuple] = []
        self.rng = Pcg32(_name_seed(0, name, 1))

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r})"

    # lifecycle -----------------------------------------------------------

    def set_scope(self, scope: str) -> None:
        self.scope = scope

    def reseed(self, seed: int) -> None:
        """Reset the runtime stream (dropout and friends) from ``seed`` and the block's scope."""
        self.rng = Pcg32(_name_seed(seed, self.scope, 1))

    def setup(self, inputs: Sequence[Tensor]) -> list[Tensor]:
        if self.is_setup:
            raise SetupError(f"block {self.scope!r} is already set up")
        inputs = list(inputs)
        if not inputs:
            raise ShapeError(f"block {self.scope!r} got no inputs")
        self.in_shapes = [t.shape for t in inputs]
        self._build(inputs)
        self.is_setup = True
        # shape capture runs in inference mode: no RNG draws, no running-stat updates
        outs = self.process(inputs, INFERENCE)
        self.out_shapes = [t.shape for t in outs]
        return outs

    def process(self, inputs: Sequence[Tensor], mode: str | None = None) -> list[Tensor]:
        """Run the block on ``inputs`` with its current variables."""
        if not self.is_setup:
            raise SetupError(f"block {self.scope!r} used before setup")
        outs = self._forward(list(inputs), mode or self.mode)
        self.outputs = outs
        return outs

    def forward(self, inputs: Sequence[Tensor], mode: str | None = None) -> list[Tensor]:
        return self.process(inputs, mode)

    def _build(self, inputs: list[Tensor]) -> None:
        pass

    def _forward(self, inputs: list[Tensor], mode: str) -> list[Tensor]:
        raise NotImplementedError

    # variables -----------------------------------------------------------

    def _init_rng(self) -> Pcg32:
        return Pcg32(_name_seed(self.seed, self.scope, 0))

    def _new_var(self, name, value, weight=False) -> Tensor:
        t = Tensor(value, requires_grad=True, name=f"{self.scope}/{name}", dtype=get_default_dtype())
        self.variables[name] = t
        if weight:
            self.weight_names.append(name)
        return t

    def _new_state(self, name, value) -> Tensor:
        t = Tensor(value, name=f"{self.scope}/{name}", dtype=get_default_dtype())
        self.states[name] = t
        return t

    def params(self) -> dict[str, Tensor]:
        """Trainable variables keyed by hierarchical name."""
        return {f"{self.scope}/{k}": v for k, v in self.variables.items()}

    def state_tensors(self) -> dict[str, Tensor]:
        """Non-trainable state (e.g. batch-norm running statistics) keyed by hierarchical name."""
        return {f"{self.scope}/{k}": v for k, v in self.states.items()}

    def weight_decay_loss(self) -> Tensor | None:
        return None

    def weight_decay_losses(self) -> list[Tensor]:
        loss = self.weight_decay_loss()
        return [] if loss is None else [loss]

    # copies --------------------------------------------------------------

    def clone_for_validation(self) -> "Block":
        """Inference-mode copy sharing every variable and state tensor."""
        twin = copy.copy(self)
        twin.mode = INFERENCE
        twin.outputs = []
        return twin

    def replicate(self) -> "Block":
        """Copy with private variable storage (same values), used for engine towers."""
        twin = copy.copy(self)
        twin.variables = {k: _fresh(v) for k, v in self.variables.items()}
        twin.states = {k: Tensor(v.data, name=v.name) for k, v in self.states.items()}
        twin.weight_names = list(self.weight_names)
        twin.outputs = []
        return twin

    def describe(self) -> str:
        return self.kind


def _fresh(t: Tensor) -> Tensor:
    return Tensor(t.data, requires_grad=t.requires_grad, name=t.name)


def uniform_init(rng: Pcg32, shape, init_para: dict | None, fan_in: int, fan_out: int) -> np.ndarray:
    """Weights drawn from U(-range, +range).

    Without an explicit ``range`` the Glorot range sqrt(6 / (fan_in + fan_out)) is used.
    """
    init_para = dict(init_para or {"name": "uniform"})
    name = init_para.pop("name", "uniform")
    rng_range = init_para.pop("range", None)
    if name != "uniform":
        raise ConfigError(f"unsupported init {name!r}; only 'uniform' is available")
    if init_para:
        raise ConfigError(f"unknown init_para keys {sorted(init_para)}")
    if rng_range is None:
        rng_range = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(shape, -rng_range, rng_range)


def _check_wd(wd):
    if wd is None:
        return None
    wd = dict(wd)
    if wd.get("type", "l2") != "l2":
        raise ConfigError(f"unsupported weight decay type {wd.get('type')!r}")
    unknown = set(wd) - {"type", "scale"}
    if unknown:
        raise ConfigError(f"unknown wd keys {sorted(unknown)}")
    return {"type": "l2", "scale": float(wd.get("scale", 0.0))}


class ParamLayer(Block):
    """Block with weights, biases and optional L2 weight decay on the weights."""

    def __init__(self, name, init_para=None, wd=None, **kw):
        super().__init__(name, **kw)
        self.init_para = init_para
        self.wd = _check_wd(wd)

    def weight_decay_loss(self) -> Tensor | None:
        if not self.wd or not self.weight_names:
            return None
        total = None
        for n in self.weight_names:
            term = ops.l2_loss(self.variables[n], self.wd["scale"])
            total = term if total is None else ops.add(total, term)
        return total


class ConvolutionLayer(ParamLayer):
    kind = "conv"

    def __init__(self, ksize, out_channel_num, strides=(1, 1), padding="SAME", name="conv", **kw):
        super().__init__(name, **kw)
        self.ksize = _pair(ksize, "ksize")
        self.strides = _pair(strides, "strides")
        self.padding = str(padding).upper()
        if self.padding not in (ops.SAME, ops.VALID):
            raise ConfigError(f"padding must be SAME or VALID, got {padding!r}")
        self.out_channel_num = int(out_channel_num)

    def _build(self, inputs):
        x = inputs[0]
        if x.data.ndim != 4:
            raise ShapeError(f"{self.scope}: convolution needs [N,H,W,C] input, got {x.shape}")
        kh, kw = self.ksize
        cin = x.shape[3]
        shape = (kh, kw, cin, self.out_channel_num)
        w = uniform_init(self._init_rng(), shape, self.init_para, kh * kw * cin, kh * kw * self.out_channel_num)
        self._new_var("weights", w, weight=True)
        self._new_var("biases", np.zeros(self.out_channel_num))

    def _forward(self, inputs, mode):
        return [ops.conv2d(inputs[0], self.variables["weights"], self.variables["biases"], self.strides, self.padding)]


class PoolingLayer(Block):
    kind = "pool"

    def __init__(self, ksize, strides=None, padding="SAME", type="max", name="pool", **kw):
        super().__init__(name, **kw)
        if type != "max":
            raise ConfigError(f"unsupported pooling type {type!r}")
        self.ksize = _pair(ksize, "ksize")
        self.strides = _pair(strides, "strides") if strides is not None else self.ksize
        self.padding = str(padding).upper()

    def _forward(self, inputs, mode):
        return [ops.maxpool2d(inputs[0], self.ksize, self.strides, self.padding)]


class ReLULayer(Block):
    kind = "relu"

    def __init__(self, name="relu", **kw):
        super().__init__(name, **kw)

    def _forward(self, inputs, mode):
        return [ops.relu(inputs[0])]


class MaxoutLayer(Block):
    kind = "maxout"

    def __init__(self, group_size, name="maxout", **kw):
        super().__init__(name, **kw)
        self.group_size = int(group_size)
        if self.group_size < 1:
            raise ConfigError("maxout group_size must be >= 1")

    def _build(self, inputs):
        c = inputs[0].shape[-1]
        if c % self.group_size:
            raise ConfigError(f"{self.scope}: group_size {self.group_size} does not divide {c} channels")

    def _forward(self, inputs, mode):
        return [ops.maxout(inputs[0], self.group_size)]


class InnerProductLayer(ParamLayer):
    kind = "ip"

    def __init__(self, out_channel_num, name="ip", **kw):
        super().__init__(name, **kw)
        self.out_channel_num = int(out_channel_num)

    def _build(self, inputs):
        x = inputs[0]
        d = int(np.prod(x.shape[1:], dtype=np.int64))
        w = uniform_init(self._init_rng(), (d, self.out_channel_num), self.init_para, d, self.out_channel_num)
        self._new_var("weights", w, weight=True)
        self._new_var("biases", np.zeros(self.out_channel_num))

    def _forward(self, inputs, mode):
        return [ops.inner_product(inputs[0], self.variables["weights"], self.variables["biases"])]


class BatchNormalizationLayer(Block):
    """Per-channel batch norm; running statistics live in ``states``."""

    kind = "bn"

    def __init__(self, epsilon=1e-5, momentum=0.99, name="bn", **kw):
        super().__init__(name, **kw)
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)

    def _build(self, inputs):
        c = inputs[0].shape[-1]
        self._new_var("gamma", np.ones(c))
        self._new_var("beta", np.zeros(c))
        self._new_state("moving_mean", np.zeros(c))
        self._new_state("moving_variance", np.ones(c))

    def _forward(self, inputs, mode):
        mean, var = self.states["moving_mean"], self.states["moving_variance"]
        y, new_mean, new_var = ops.batch_norm(
            inputs[0], self.variables["gamma"], self.variables["beta"], self.epsilon, mode,
            mean.data, var.data, self.momentum,
        )
        if mode == TRAIN:
            mean.assign(new_mean)
            var.assign(new_var)
        return [y]


class DropoutLayer(Block):
    kind = "dropout"

    def __init__(self, keep_prob=0.5, name="dropout", **kw):
        super().__init__(name, **kw)
        self.keep_prob = float(keep_prob)
        if not 0 < self.keep_prob <= 1:
            raise ConfigError(f"keep_prob must be in (0, 1], got {keep_prob}")

    def _forward(self, inputs, mode):
        return [ops.dropout(inputs[0], self.keep_prob, mode, self.rng)]


class SoftmaxWithLossLayer(Block):
    """Takes ``[logits, labels]``; emits ``[loss, accuracy, predictions]``."""

    kind = "softmax_loss"
    num_outputs = 3
    is_loss = True

    def __init__(self, class_num, name="loss", **kw):
        super().__init__(name, **kw)
        self.class_num = int(class_num)

    def _build(self, inputs):
        if len(inputs) != 2:
            raise ShapeError(f"{self.scope}: expects [logits, labels], got {len(inputs)} inputs")
        if inputs[0].data.ndim != 2 or inputs[0].shape[1] != self.class_num:
            raise ShapeError(f"{self.scope}: logits shape {inputs[0].shape} does not have {self.class_num} classes on axis 1")

    def _forward(self, inputs, mode):
        loss, predictions, accuracy = ops.softmax_cross_entropy(inputs[0], inputs[1])
        return [loss, Tensor(accuracy, dtype=loss.dtype), Tensor(predictions)]


class MergeLayer(Block):
    """Elementwise sum of all inputs (residual joins)."""

    kind = "merge"

    def __init__(self, name="merge", **kw):
        super().__init__(name, **kw)

    def _build(self, inputs):
        shapes = {t.shape for t in inputs}
        if len(shapes) != 1:
            raise ShapeError(f"{self.scope}: merge inputs have differing shapes {sorted(shapes)}")

    def _forward(self, inputs, mode):
        out = inputs[0]
        for t in inputs[1:]:
            out = ops.add(out, t)
        return [out]


class SequentialBlock(Block):
    """A chain of sub-blocks, each consuming the previous one's outputs."""

    kind = "sequential"

    def __init__(self, blocks: Sequence[Block], name="seq", **kw):
        super().__init__(name, **kw)
        self.blocks = list(blocks)
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise ConfigError(f"{name}: duplicate sub-block names {names}")
        self.num_outputs = self.blocks[-1].num_outputs if self.blocks else 1

    def set_scope(self, scope):
        self.scope = scope
        for b in self.blocks:
            b.set_scope(f"{scope}/{b.name}")

    def reseed(self, seed):
        super().reseed(seed)
        for b in self.blocks:
            b.reseed(seed)

    def _build(self, inputs):
        x = inputs
        for b in self.blocks:
            b.seed = self.seed
            x = b.setup(x)

    def _forward(self, inputs, mode):
        x = inputs
        for b in self.blocks:
            x = b.process(x, mode)
        return x

    def params(self):
        out = {}
        for b in self.blocks:
            out.update(b.params())
        return out

    def state_tensors(self):
        out = {}
        for b in self.blocks:
            out.update(b.state_tensors())
        return out

    def weight_decay_losses(self):
        return [l for b in self.blocks for l in b.weight_decay_losses()]

    def clone_for_validation(self):
        twin = super().clone_for_validation()
        twin.blocks = [b.clone_for_validation() for b in self.blocks]
        return twin

    def replicate(self):
        twin = super().replicate()
        twin.blocks = [b.replicate() for b in self.blocks]
        return twin


def activation_layer(spec: dict, name: str = "activation") -> Block:
    """Build an activation block from ``{"type": "relu"}`` or ``{"type": "maxout", "group_size": g}``."""
    spec = dict(spec)
    kind = spec.pop("type", None)
    if kind == "relu":
        layer = ReLULayer(name=name)
    elif kind == "maxout":
        layer = MaxoutLayer(group_size=spec.pop("group_size", 2), name=name)
    else:
        raise ConfigError(f"unknown activation type {kind!r}")
    if spec:
        raise ConfigError(f"unknown activation keys {sorted(spec)}")
    return layer


def cnn_block(
    ksize,
    out_channel_num,
    init_para=None,
    wd=None,
    pool_size=(2, 2),
    pool_stride=None,
    activation=None,
    keep_prob=None,
    bn=False,
    strides=(1, 1),
    padding="SAME",
    name="cnn_block",
    **kw,
) -> SequentialBlock:
    """conv -> (bn) -> activation -> max pool -> (dropout)."""
    blocks: list[Block] = [
        ConvolutionLayer(ksize=ksize, out_channel_num=out_channel_num, strides=strides, padding=padding,
                         init_para=init_para, wd=wd, name="conv")
    ]
    if bn:
        blocks.append(BatchNormalizationLayer(name="bn"))
    blocks.append(activation_layer(activation or {"type": "relu"}, name="activation"))
    blocks.append(PoolingLayer(ksize=pool_size, strides=pool_stride or pool_size, padding=padding, name="pool"))
    if keep_prob is not None and keep_prob < 1:
        blocks.append(DropoutLayer(keep_prob=keep_prob, name="dropout"))
    return SequentialBlock(blocks, name=name, **kw)


LAYER_TYPES: dict[str, Any] = {
    "conv": ConvolutionLayer,
    "pool": PoolingLayer,
    "relu": ReLULayer,
    "maxout": MaxoutLayer,
    "ip": InnerProductLayer,
    "bn": BatchNormalizationLayer,
    "dropout": DropoutLayer,
    "softmax_loss": SoftmaxWithLossLayer,
    "merge": MergeLayer,
    "cnn_block": cnn_block,
}


def build_block(config: dict) -> Block:
    """Instantiate a layer from a config record ``{"type": ..., "name": ..., ...}``.

    Unknown keys are rejected.
    """
    config = dict(config)
    kind = config.pop("type", None)
    if kind not in LAYER_TYPES:
        raise ConfigError(f"unknown block type {kind!r}; expected one of {sorted(LAYER_TYPES)}")
    factory = LAYER_TYPES[kind]
    sig = inspect.signature(factory)
    allowed = set(sig.parameters) - {"self", "kw", "args"}
    if factory is not cnn_block:
        # keyword arguments accepted by the base classes
        allowed |= {"inputs", "init_para", "wd", "mode"} if issubclass(factory, ParamLayer) else {"inputs", "mode"}
    else:
        allowed |= {"inputs", "mode"}
    unknown = set(config) - allowed
    if unknown:
        raise ConfigError(f"{kind}: unknown keys {sorted(unknown)}")
    return factory(**config)
