"""Parameter initialisers and small composite layers."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import Tensor, parameter, relu, tanh

ACTIVATIONS = {"relu": relu, "tanh": tanh, "linear": lambda x: x}


def activation(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown nonlinearity {name!r}; choose from {sorted(ACTIVATIONS)}") from None


def init_conv(params: dict, rng: np.random.Generator, name: str, k: int, cin: int, cout: int,
              bias: bool = True, gain: float = 2.0) -> None:
    std = np.sqrt(gain / (k * k * cin))
    params[f"{name}.w"] = parameter(rng.normal(0.0, std, size=(k, k, cin, cout)), f"{name}.w")
    if bias:
        params[f"{name}.b"] = parameter(np.zeros(cout), f"{name}.b")


def init_linear(params: dict, rng: np.random.Generator, name: str, cin: int, cout: int,
                bias: bool = True, gain: float = 2.0) -> None:
    std = np.sqrt(gain / cin)
    params[f"{name}.w"] = parameter(rng.normal(0.0, std, size=(cin, cout)), f"{name}.w")
    if bias:
        params[f"{name}.b"] = parameter(np.zeros(cout), f"{name}.b")


def dense(x, params: dict, name: str) -> Tensor:
    return F.linear(x, params[f"{name}.w"], params.get(f"{name}.b"))


def conv(x, params: dict, name: str, stride: int = 1) -> Tensor:
    return F.conv2d(x, params[f"{name}.w"], params.get(f"{name}.b"), stride=stride)


def init_res_block(params, rng, name, k, cin, cout):
    init_conv(params, rng, f"{name}.conv1", k, cin, cout)
    init_conv(params, rng, f"{name}.conv2", k, cout, cout)
    init_conv(params, rng, f"{name}.proj", 1, cin, cout)


def res_block(x, params, name, stride=1, act=relu) -> Tensor:
    """Two k x k convolutions plus a 1 x 1 projected skip path."""
    y = act(conv(x, params, f"{name}.conv1", stride))
    y = conv(y, params, f"{name}.conv2")
    return act(y + conv(x, params, f"{name}.proj", stride))
