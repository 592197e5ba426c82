"""Trainable layer primitives built on the autodiff engine.

Convolution weights are drawn from a zero-mean Gaussian (sigma 0.02) using a
caller-supplied random generator, so construction order and seeding fully
determine the initial parameters. Biases start at zero; instance-norm scale
and shift start at one and zero.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Module, parameter
from .errors import ParameterError

WEIGHT_SIGMA = 0.02


def _require_positive(name: str, value: int) -> None:
    if int(value) != value or value < 1:
        raise ParameterError(f"{name} must be a positive integer, got {value!r}")


class Conv2d(Module):
    """2-D convolution with optional bias; zero or replicate same-padding."""

    def __init__(self, in_channels, out_channels, kernel_size, rng,
                 stride=1, padding=0, pad_mode="zero", bias=True):
        super().__init__()
        for name, value in (("in_channels", in_channels),
                            ("out_channels", out_channels),
                            ("kernel_size", kernel_size), ("stride", stride)):
            _require_positive(name, value)
        self.stride = stride
        self.padding = padding
        self.pad_mode = pad_mode
        self.weight = parameter(rng.normal(
            0.0, WEIGHT_SIGMA,
            (out_channels, in_channels, kernel_size, kernel_size)).astype(np.float32))
        self.bias = parameter(np.zeros(out_channels, dtype=np.float32)) if bias else None

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias,
                         stride=self.stride, padding=self.padding,
                         pad_mode=self.pad_mode)

    def __call__(self, x):
        return self.forward(x)


class DepthwiseConv2d(Module):
    """Per-channel spatial convolution with replicate same-padding."""

    def __init__(self, channels, kernel_size, rng, bias=True):
        super().__init__()
        _require_positive("channels", channels)
        _require_positive("kernel_size", kernel_size)
        if kernel_size % 2 == 0:
            raise ParameterError(f"kernel_size must be odd, got {kernel_size}")
        self.padding = kernel_size // 2
        self.weight = parameter(rng.normal(
            0.0, WEIGHT_SIGMA, (channels, kernel_size, kernel_size)).astype(np.float32))
        self.bias = parameter(np.zeros(channels, dtype=np.float32)) if bias else None

    def forward(self, x):
        return ad.depthwise_conv2d(x, self.weight, self.bias,
                                   padding=self.padding, pad_mode="replicate")

    def __call__(self, x):
        return self.forward(x)


class InstanceNorm2d(Module):
    """Per-sample, per-channel spatial normalization with learned affine."""

    def __init__(self, channels):
        super().__init__()
        _require_positive("channels", channels)
        self.gamma = parameter(np.ones(channels, dtype=np.float32))
        self.beta = parameter(np.zeros(channels, dtype=np.float32))

    def forward(self, x):
        return ad.instance_norm(x, self.gamma, self.beta)

    def __call__(self, x):
        return self.forward(x)
