"""Ready-made brains."""
from __future__ import annotations

from akid.blocks import (
    ConvolutionLayer,
    InnerProductLayer,
    MergeLayer,
    PoolingLayer,
    ReLULayer,
    SoftmaxWithLossLayer,
)
from akid.brain import Brain


class OneLayerBrain(Brain):
    """conv1 -> relu1 -> pool1 -> ip1 -> loss, for 28x28 single-channel digits."""

    def __init__(self, class_num: int = 10, **kwargs):
        super().__init__(**kwargs)
        self.attach(
            ConvolutionLayer(ksize=[5, 5], strides=[1, 1, 1, 1], padding="SAME", out_channel_num=32, name="conv1")
        )
        self.attach(ReLULayer(name="relu1"))
        self.attach(PoolingLayer(ksize=[1, 5, 5, 1], strides=[1, 5, 5, 1], padding="SAME", name="pool1"))
        self.attach(InnerProductLayer(out_channel_num=class_num, name="ip1"))
        self.attach(
            SoftmaxWithLossLayer(
                class_num=class_num,
                inputs=[{"name": "ip1", "idxs": [0]}, {"name": "system_in", "idxs": [1]}],
                name="loss",
            )
        )


class LeNet(Brain):
    """Two conv/relu/pool stages, a hidden inner product layer, and softmax loss."""

    def __init__(self, class_num: int = 10, channels=(32, 64), hidden: int = 512, init_para=None, wd=None, **kwargs):
        super().__init__(**kwargs)
        c1, c2 = channels
        self.attach(ConvolutionLayer(ksize=[5, 5], out_channel_num=c1, init_para=init_para, wd=wd, name="conv1"))
        self.attach(ReLULayer(name="relu1"))
        self.attach(PoolingLayer(ksize=[2, 2], strides=[2, 2], name="pool1"))
        self.attach(ConvolutionLayer(ksize=[5, 5], out_channel_num=c2, init_para=init_para, wd=wd, name="conv2"))
        self.attach(ReLULayer(name="relu2"))
        self.attach(PoolingLayer(ksize=[2, 2], strides=[2, 2], name="pool2"))
        self.attach(InnerProductLayer(out_channel_num=hidden, init_para=init_para, wd=wd, name="ip1"))
        self.attach(ReLULayer(name="relu3"))
        self.attach(InnerProductLayer(out_channel_num=class_num, init_para=init_para, wd=wd, name="ip2"))
        self.attach(
            SoftmaxWithLossLayer(
                class_num=class_num,
                inputs=[{"name": "ip2", "idxs": [0]}, {"name": "system_in", "idxs": [1]}],
                name="loss",
            )
        )


def residual_unit(brain: Brain, name: str, out_channel_num: int, source: str | None = None, init_para=None) -> str:
    """Attach conv-relu-conv branch plus an identity stem merged by addition.

    ``source`` names the block feeding the unit (``None`` for the previous
    block).  Returns the merge block's name.
    """
    head = source or (brain.blocks[-1].name if brain.blocks else "system_in")
    brain.attach(
        ConvolutionLayer(ksize=[3, 3], out_channel_num=out_channel_num, init_para=init_para, name=f"{name}_conv_a"),
        inputs=[{"name": head, "idxs": [0]}],
    )
    brain.attach(ReLULayer(name=f"{name}_relu"))
    brain.attach(ConvolutionLayer(ksize=[3, 3], out_channel_num=out_channel_num, init_para=init_para, name=f"{name}_conv_b"))
    brain.attach(
        MergeLayer(name=f"{name}_merge"),
        inputs=[{"name": head, "idxs": [0]}, {"name": f"{name}_conv_b", "idxs": [0]}],
    )
    return f"{name}_merge"
