"""Reverse-mode autodiff core, layers, backbone, optimiser and checkpoints."""
from .backbone import BackboneConfig, init_backbone, resunet_forward
from .checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from .functional import (binary_cross_entropy, bilinear_sample, conv2d, deconv2d, global_avg_pool,
                         linear, segment_max, scatter_grid, smooth_l1, softmax)
from .optim import Adam, adam_step
from .tensor import (NonFiniteError, ShapeError, Tensor, add, as_tensor, concat, exp, log, mul,
                     no_grad, parameter, relu, reshape, set_debug, sigmoid, stack, take_rows, tanh,
                     transpose)

__all__ = [
    "Adam", "BackboneConfig", "CheckpointError", "NonFiniteError", "ShapeError", "Tensor", "adam_step",
    "add", "as_tensor", "bilinear_sample", "binary_cross_entropy", "concat", "conv2d", "deconv2d",
    "exp", "global_avg_pool", "init_backbone", "linear", "load_checkpoint", "log", "segment_max", "mul",
    "no_grad", "parameter", "read_manifest", "relu", "reshape", "resunet_forward", "save_checkpoint",
    "scatter_grid", "set_debug", "sigmoid", "smooth_l1", "softmax", "stack", "take_rows", "tanh",
    "transpose",
]
