"""A small convolutional trunk for desk-scale images.

Four 3x3 blocks (16, 32, 64, 128 channels).  The first three stride by
two for a total stride of eight; the last keeps stride one and dilates
by two instead, widening the receptive field without losing resolution.
Weights use He initialization (std sqrt(2/fan_in)) so activations keep
a usable scale through the stack; biases start at zero.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .rng import XorShift64Star, derive_seed
from .tensor import Tensor, conv2d, parameter, relu

CHANNELS = (16, 32, 64, 128)
STRIDE = 8
# (stride, pad, dilation) per block
_BLOCKS = ((2, 1, 1), (2, 1, 1), (2, 1, 1), (1, 2, 2))


def build_backbone(rng_seed: int, in_channels: int = 3) -> "OrderedDict[str, Tensor]":
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    cin = in_channels
    for idx, cout in enumerate(CHANNELS, start=1):
        wname = f"backbone.conv{idx}.w"
        bname = f"backbone.conv{idx}.b"
        fan_in = cin * 9
        std = float(np.sqrt(2.0 / fan_in))
        gen = XorShift64Star(derive_seed(rng_seed, wname))
        params[wname] = parameter(
            gen.normals(cout * cin * 9, 0.0, std).reshape(cout, cin, 3, 3)
        )
        params[bname] = parameter(np.zeros(cout))
        cin = cout
    return params


def backbone_forward(params, image: Tensor) -> Tensor:
    """[N, 3, H, W] -> [N, 128, H/8, W/8] feature maps."""
    x = image
    for idx, (stride, pad, dil) in enumerate(_BLOCKS, start=1):
        x = relu(
            conv2d(
                x,
                params[f"backbone.conv{idx}.w"],
                params[f"backbone.conv{idx}.b"],
                stride=stride,
                pad=pad,
                dilation=dil,
            )
        )
    return x
