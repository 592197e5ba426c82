"""Architectural building blocks for the dehazing generators.

- GatedDepthwiseBlock: pointwise/depthwise sandwich whose output multiplies
  the block input elementwise, optionally through a sigmoid gate.
- ResidualDenseBlock: densely connected 3x3 convolutions with local feature
  fusion and a residual skip.
- FeatureRefinementBlock: two dense blocks plus a refinement convolution,
  with the block input subtracted from the result.
- AttentionFusion: channel-attention fusion of two equally shaped feature
  maps back into one.
- ResidualBlock: plain two-convolution residual stage.

All blocks preserve the (B, C, H, W) shape of their input.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Module, ModuleList
from .errors import ParameterError, ShapeError
from .layers import Conv2d, DepthwiseConv2d, InstanceNorm2d


@dataclass(frozen=True)
class BlockConfig:
    """Shared sizing knobs for the feature-space blocks."""

    channels: int
    rdb_growth: int = 32
    rdb_layers: int = 4
    use_gate_activation: bool = True

    def __post_init__(self):
        for name in ("channels", "rdb_growth", "rdb_layers"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ParameterError(f"{name} must be a positive integer, got {value!r}")
        if self.channels < 1:
            raise ParameterError(f"channels must be >= 1, got {self.channels}")
        if self.rdb_layers < 2:
            raise ParameterError(f"rdb_layers must be >= 2, got {self.rdb_layers}")


def _check_channels(block_name: str, x, channels: int) -> None:
    if x.data.ndim != 4 or x.data.shape[1] != channels:
        raise ShapeError(
            f"{block_name} expected B x {channels} x H x W input, "
            f"got shape {tuple(x.data.shape)}")


class GatedDepthwiseBlock(Module):
    """Pointwise -> depthwise 5x5 -> depthwise 7x7 -> pointwise, times input.

    The final pointwise output optionally passes through a sigmoid before the
    elementwise multiplication, bounding the modulation factor to (0, 1).
    Multiplying by the input means an all-zero input always yields an
    all-zero output regardless of weights or biases.
    """

    def __init__(self, channels, rng, use_gate_activation=True):
        super().__init__()
        self.channels = channels
        self.use_gate_activation = use_gate_activation
        self.pw_in = Conv2d(channels, channels, 1, rng)
        self.dw5 = DepthwiseConv2d(channels, 5, rng)
        self.dw7 = DepthwiseConv2d(channels, 7, rng)
        self.pw_out = Conv2d(channels, channels, 1, rng)

    def __call__(self, x):
        _check_channels("GatedDepthwiseBlock", x, self.channels)
        h = self.pw_out(self.dw7(self.dw5(self.pw_in(x))))
        if self.use_gate_activation:
            h = ad.sigmoid(h)
        return h * x


class ResidualDenseBlock(Module):
    """Dense 3x3 convolutions, 1x1 local feature fusion, residual skip.

    Layer i receives the channel concatenation of the block input and every
    earlier layer's output. With all weights and biases zero the block is the
    identity map.
    """

    def __init__(self, channels, growth, layers, rng):
        super().__init__()
        if layers < 1:
            raise ParameterError(f"layers must be >= 1, got {layers}")
        self.channels = channels
        self.dense = ModuleList(
            Conv2d(channels + i * growth, growth, 3, rng, padding=1)
            for i in range(layers))
        self.fusion = Conv2d(channels + layers * growth, channels, 1, rng)

    def __call__(self, x):
        _check_channels("ResidualDenseBlock", x, self.channels)
        features = [x]
        for conv in self.dense:
            stacked = features[0] if len(features) == 1 else ad.concat(features)
            features.append(ad.relu(conv(stacked)))
        return self.fusion(ad.concat(features)) + x


class FeatureRefinementBlock(Module):
    """Refinement convolution over two dense blocks, minus the input.

    With all weights zero the output is the negated input.
    """

    def __init__(self, channels, growth, layers, rng):
        super().__init__()
        self.channels = channels
        self.rdb1 = ResidualDenseBlock(channels, growth, layers, rng)
        self.rdb2 = ResidualDenseBlock(channels, growth, layers, rng)
        self.refine = Conv2d(channels, channels, 3, rng, padding=1)

    def __call__(self, x):
        _check_channels("FeatureRefinementBlock", x, self.channels)
        return self.refine(self.rdb2(self.rdb1(x))) - x


class AttentionFusion(Module):
    """Channel-attention fusion of two feature maps of identical shape.

    Concatenates the inputs, derives per-channel weights from the globally
    pooled concatenation through a two-layer bottleneck and a sigmoid,
    rescales the concatenation, and projects back to the input width.
    """

    def __init__(self, channels, rng, reduction=4):
        super().__init__()
        self.channels = channels
        squeezed = max(1, (2 * channels) // reduction)
        self.attn_reduce = Conv2d(2 * channels, squeezed, 1, rng)
        self.attn_expand = Conv2d(squeezed, 2 * channels, 1, rng)
        self.project = Conv2d(2 * channels, channels, 1, rng)

    def __call__(self, primary, secondary):
        _check_channels("AttentionFusion", primary, self.channels)
        if primary.data.shape != secondary.data.shape:
            raise ShapeError(
                f"AttentionFusion inputs must share shape, got "
                f"{tuple(primary.data.shape)} vs {tuple(secondary.data.shape)}")
        stacked = ad.concat([primary, secondary])
        attention = ad.sigmoid(self.attn_expand(
            ad.relu(self.attn_reduce(ad.global_avg_pool(stacked)))))
        return self.project(stacked * attention)


class ResidualBlock(Module):
    """Conv-norm-relu-conv-norm with an additive skip connection."""

    def __init__(self, channels, rng):
        super().__init__()
        self.channels = channels
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.norm1 = InstanceNorm2d(channels)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1)
        self.norm2 = InstanceNorm2d(channels)

    def __call__(self, x):
        _check_channels("ResidualBlock", x, self.channels)
        h = ad.relu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(h))
