"""ResUNet-style backbone shared across all input frames."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .layers import activation, init_conv, init_res_block, res_block
from .tensor import ShapeError, Tensor, concat


@dataclass(frozen=True)
class BackboneConfig:
    c0: int = 32
    c1: int = 64
    c2: int = 128
    kernel: int = 3
    nonlinearity: str = "relu"
    channel_divisor: int = 4

    def __post_init__(self):
        if min(self.channels) <= 0:
            raise ValueError(f"backbone channels must be positive, got {self.channels}")

    @property
    def channels(self) -> tuple[int, int, int]:
        d = self.channel_divisor
        return (self.c0 // d, self.c1 // d, self.c2 // d)

    @property
    def out_channels(self) -> int:
        return sum(self.channels)


def init_backbone(rng: np.random.Generator, cfg: BackboneConfig, c_in: int, prefix: str = "backbone") -> dict:
    c0, c1, c2 = cfg.channels
    k = cfg.kernel
    params: dict = {}
    init_res_block(params, rng, f"{prefix}.block1", k, c_in, c0)
    init_res_block(params, rng, f"{prefix}.block2", k, c0, c1)
    init_res_block(params, rng, f"{prefix}.block3", k, c1, c2)
    init_conv(params, rng, f"{prefix}.up2", 2, c1, c1)
    init_conv(params, rng, f"{prefix}.up3", 4, c2, c2)
    return params


def resunet_forward(images: Tensor, cfg: BackboneConfig, params: dict, prefix: str = "backbone") -> Tensor:
    """Map pseudo-images (T, H, W, C_in) to backbone features (T, H, W, C0+C1+C2).

    The T frames run as one batch through the same parameters, so gradients
    from every frame land in the same buffers.
    """
    if images.ndim != 4:
        raise ShapeError(f"expected (T, H, W, C) pseudo-images, got {images.shape}")
    _, h, w, _ = images.shape
    if h % 4 or w % 4:
        raise ShapeError(f"grid {h}x{w} must be divisible by 4")
    act = activation(cfg.nonlinearity)
    b1 = res_block(images, params, f"{prefix}.block1", 1, act)
    b2 = res_block(b1, params, f"{prefix}.block2", 2, act)
    b3 = res_block(b2, params, f"{prefix}.block3", 2, act)
    u2 = act(F.deconv2d(b2, params[f"{prefix}.up2.w"], params[f"{prefix}.up2.b"], stride=2))
    u3 = act(F.deconv2d(b3, params[f"{prefix}.up3.w"], params[f"{prefix}.up3.b"], stride=4))
    return concat([b1, u2, u3], axis=-1)
