"""A small block-structured neural network library with data-parallel training and grid tuning."""
from akid.blocks import (
    INFERENCE,
    TRAIN,
    BatchNormalizationLayer,
    Block,
    ConfigError,
    ConvolutionLayer,
    DropoutLayer,
    InnerProductLayer,
    MaxoutLayer,
    MergeLayer,
    PoolingLayer,
    ReLULayer,
    SequentialBlock,
    SetupError,
    SoftmaxWithLossLayer,
    cnn_block,
)
from akid.brain import Brain, InputRef
from akid.engine import Engine, EngineConfig
from akid.kid import Kid
from akid.kongfu import KongFu, MomentumKongFu, SGDKongFu
from akid.observer import Observer
from akid.sensor import FeedSensor, Joker, MNISTFeedSource, SyntheticSource, data_root
from akid.tensor import Tape, Tensor
from akid.tuner import TuneSpec, tune

AKID_DATA_PATH = str(data_root())

__version__ = "0.1.0"
