"""Desk-scale miniatures of the four compared architecture families.

Widths and depths below are fixed so that, at a 64 px input, parameter counts
order as MobileMini < Res50Mini < Res101Mini < VggMini (the same ordering as
the full-size networks) and every model stays under 2M parameters.

=============  ==========================================================
MobileMini     conv3x3/2 (8) -> IR(16,s2) IR(16) IR(24,s2) IR(24), t=6
               -> GAP -> Dense(2)
VggMini        [conv3x3 x2 + maxpool] x4 with 16/32/64/128 channels
               -> Dense(64) -> ReLU -> Dense(2)
Res50Mini      conv3x3/2 (16) -> bottlenecks 3 x (8->32), 3 x (16->64, s2),
               2 x (32->128, s2) -> GAP -> Dense(2)     (8 blocks)
Res101Mini     same widths with 4 / 8 / 4 blocks               (16 blocks)
=============  ==========================================================
"""

from __future__ import annotations

import enum

from .errors import DataInvariantError
from .nn.layers import (Conv2D, Dense, GlobalAvgPool, InvertedResidual, MaxPool2D,
                        ReLU, ReLU6, ResidualBottleneck)
from .nn.model import ModelGraph

SUPPORTED_INPUT_SIZES = (32, 64, 96)


class ArchitectureId(str, enum.Enum):
    MOBILE = "mobile"
    VGG = "vgg"
    RES50 = "res50"
    RES101 = "res101"

    @property
    def display_name(self) -> str:
        return {"mobile": "MobileMini", "vgg": "VggMini",
                "res50": "Res50Mini", "res101": "Res101Mini"}[self.value]


def _mobile(size: int) -> list:
    return [
        Conv2D(3, 8, 3, stride=2), ReLU6(),
        InvertedResidual(8, 16, stride=2, expansion=6),
        InvertedResidual(16, 16, stride=1, expansion=6),
        InvertedResidual(16, 24, stride=2, expansion=6),
        InvertedResidual(24, 24, stride=1, expansion=6),
        GlobalAvgPool(),
        Dense(24, 2),
    ]


def _vgg(size: int) -> list:
    layers, cin = [], 3
    for width in (16, 32, 64, 128):
        layers += [Conv2D(cin, width, 3), ReLU(), Conv2D(width, width, 3), ReLU(), MaxPool2D(2)]
        cin = width
    side = size // 16
    return layers + [Dense(side * side * cin, 64), ReLU(), Dense(64, 2)]


def _resnet(size: int, blocks: tuple) -> list:
    layers = [Conv2D(3, 16, 3, stride=2), ReLU()]
    cin = 16
    for (mid, cout, stride), n in zip(((8, 32, 1), (16, 64, 2), (32, 128, 2)), blocks):
        for i in range(n):
            layers.append(ResidualBottleneck(cin, mid, cout, stride if i == 0 else 1))
            cin = cout
    return layers + [GlobalAvgPool(), Dense(cin, 2)]


def build(arch, input_size: int = 64, seed: int = 0) -> ModelGraph:
    arch = ArchitectureId(arch)
    if input_size not in SUPPORTED_INPUT_SIZES:
        raise DataInvariantError(
            f"unsupported input size {input_size}; choose one of {SUPPORTED_INPUT_SIZES}")
    if arch is ArchitectureId.MOBILE:
        layers = _mobile(input_size)
    elif arch is ArchitectureId.VGG:
        layers = _vgg(input_size)
    elif arch is ArchitectureId.RES50:
        layers = _resnet(input_size, (3, 3, 2))
    else:
        layers = _resnet(input_size, (4, 8, 4))
    return ModelGraph(arch.display_name, (input_size, input_size, 3), layers,
                      seed=seed, meta={"arch": arch.value})


def param_count(model: ModelGraph) -> int:
    return model.param_count()


def flops_estimate(model: ModelGraph, input_size: int = None) -> int:
    """Multiply-accumulate count of one forward pass on one sample."""
    if input_size is not None and model.input_shape[0] != input_size:
        raise DataInvariantError("model was built for a different input size")
    return model.flops()
