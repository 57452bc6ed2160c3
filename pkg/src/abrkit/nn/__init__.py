"""Minimal float64 neural kernel: autodiff tensors, layers, Adam, checkpoints."""

from .tensor import (
    IndivisibleChannels,
    InvalidProbability,
    NoTape,
    NonFiniteValue,
    ShapeMismatch,
    Tensor,
    TensorError,
    backward,
    batch_norm,
    channel_shuffle,
    concat,
    conv1d,
    cross_entropy,
    dropout,
    exp,
    gather_rows,
    global_avg_pool,
    log,
    log_softmax,
    matmul,
    max_pool1d,
    mul,
    add,
    no_grad,
    relu,
    reshape,
    residual_add,
    scale_channels,
    shuffle_permutation,
    sigmoid,
    softmax,
    square,
    tmean,
    tsum,
)
from .layers import BatchNorm1d, Conv1d, Dropout, Linear, Module, ModuleList, SEBlock, se_block
from .optim import Adam, UninitializedState
from .checkpoint import CheckpointError, load_params, save_params

__all__ = [
    "Tensor",
    "TensorError",
    "ShapeMismatch",
    "NoTape",
    "NonFiniteValue",
    "IndivisibleChannels",
    "InvalidProbability",
    "backward",
    "no_grad",
    "add",
    "mul",
    "square",
    "log",
    "exp",
    "relu",
    "sigmoid",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "tsum",
    "tmean",
    "reshape",
    "concat",
    "matmul",
    "gather_rows",
    "conv1d",
    "max_pool1d",
    "global_avg_pool",
    "scale_channels",
    "channel_shuffle",
    "shuffle_permutation",
    "batch_norm",
    "dropout",
    "residual_add",
    "Module",
    "ModuleList",
    "Linear",
    "Conv1d",
    "BatchNorm1d",
    "SEBlock",
    "se_block",
    "Dropout",
    "Adam",
    "UninitializedState",
    "save_params",
    "load_params",
    "CheckpointError",
]
