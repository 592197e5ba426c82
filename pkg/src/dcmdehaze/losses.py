"""Objective terms for unpaired dehazing training.

Provides cycle-consistency reconstruction error, least-squares adversarial
terms, a contour term built from Sobel gradient magnitudes, and their
weighted combination. Every operation accepts either plain numpy arrays
(returning Python floats) or autodiff tensors (returning scalar tensors
wired into the computation graph), so the same definitions serve both the
training loop and closed-form verification.

Array layout conventions: a single image is H x W x 3 channel-last; a batch
is B x C x H x W channel-first. Autodiff tensors are always batched
(4-dimensional). Grayscale maps are H x W, or B x 1 x H x W when batched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import NumericError, ParameterError, ShapeError, ValidationError

# Horizontal-change detector (left/right neighborhood difference) and its
# transpose for vertical changes. Correlation, not convolution: kernels are
# applied as written, without flipping.
SOBEL_HORIZONTAL = np.array([[-1.0, 0.0, 1.0],
                             [-2.0, 0.0, 2.0],
                             [-1.0, 0.0, 1.0]])
SOBEL_VERTICAL = np.array([[-1.0, -2.0, -1.0],
                           [0.0, 0.0, 0.0],
                           [1.0, 2.0, 1.0]])

# ITU-R BT.601 luminance coefficients.
GRAY_WEIGHTS = (0.299, 0.587, 0.114)

# Added under the square root of the gradient magnitude so its derivative
# stays finite where both gradients vanish. The literal contour loss
# subtracts the resulting per-pixel floor so an edge-free image scores
# exactly zero; the floor cancels on its own in matched mode.
MAGNITUDE_EPS = 1e-12
MAGNITUDE_FLOOR = float(np.sqrt(MAGNITUDE_EPS))

CONTOUR_MODES = ("literal", "matched")


@dataclass(frozen=True)
class LossWeights:
    """Nonnegative weights for the three generator-side objective terms."""

    lambda_cyc: float = 1.0
    lambda_adv: float = 1.0
    lambda_contour: float = 0.5

    def __post_init__(self):
        for name in ("lambda_cyc", "lambda_adv", "lambda_contour"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ParameterError(f"{name} must be a finite number, got {value!r}")
            if value < 0:
                raise ParameterError(f"{name} must be >= 0, got {value}")


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar loss components for one training step, plus the weighted total.

    ``total`` combines the generator-side terms: cyc, adv_g and contour,
    scaled by their weights. The discriminator term adv_d is logged alongside
    but optimized separately.
    """

    cyc: float
    adv_g: float
    adv_d: float
    contour: float
    total: float

    @classmethod
    def weighted(cls, cyc, adv_g, adv_d, contour, weights: LossWeights) -> "LossBreakdown":
        total = total_loss(float(cyc), float(adv_g), float(contour), weights)
        return cls(cyc=float(cyc), adv_g=float(adv_g), adv_d=float(adv_d),
                   contour=float(contour), total=float(total))

    def as_dict(self) -> dict:
        return {"cyc": self.cyc, "adv_g": self.adv_g, "adv_d": self.adv_d,
                "contour": self.contour, "total": self.total}


class GradientPair(NamedTuple):
    """Horizontal and vertical edge-response maps over the valid region."""

    gx: object
    gy: object


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _check_finite(name: str, x) -> None:
    if not np.all(np.isfinite(_data(x))):
        raise ValidationError(f"{name} contains non-finite values")


def cycle_loss(clear_real, clear_cycled, hazy_real, hazy_cycled):
    """Mean absolute reconstruction error summed over both cycle directions.

    Each expectation is the arithmetic mean over every element (batch, channel
    and pixel), so the value is resolution-independent.
    """
    for name, a, b in (("clear", clear_real, clear_cycled),
                       ("hazy", hazy_real, hazy_cycled)):
        if _data(a).shape != _data(b).shape:
            raise ShapeError(
                f"{name} pair shapes differ: {_data(a).shape} vs {_data(b).shape}")
        _check_finite(f"{name} original", a)
        _check_finite(f"{name} reconstruction", b)
    if _any_tensor(clear_real, clear_cycled, hazy_real, hazy_cycled):
        g, g_hat = ad.as_tensor(clear_real), ad.as_tensor(clear_cycled)
        h, h_hat = ad.as_tensor(hazy_real), ad.as_tensor(hazy_cycled)
        return ad.mean_all(ad.absolute(g - g_hat)) + ad.mean_all(ad.absolute(h - h_hat))
    return float(np.mean(np.abs(np.asarray(clear_real) - np.asarray(clear_cycled)))
                 + np.mean(np.abs(np.asarray(hazy_real) - np.asarray(hazy_cycled))))


def adv_loss_discriminator(real_scores, fake_scores):
    """Least-squares discriminator objective.

    Pushes scores on genuine samples toward 1 and scores on generated samples
    toward 0: mean((real - 1)^2) + mean(fake^2).
    """
    _check_finite("real_scores", real_scores)
    _check_finite("fake_scores", fake_scores)
    if _any_tensor(real_scores, fake_scores):
        r, f = ad.as_tensor(real_scores), ad.as_tensor(fake_scores)
        r1 = r - 1.0
        return ad.mean_all(r1 * r1) + ad.mean_all(f * f)
    r = np.asarray(real_scores)
    f = np.asarray(fake_scores)
    return float(np.mean((r - 1.0) ** 2) + np.mean(f ** 2))


def adv_loss_generator(fake_scores):
    """Least-squares generator objective: mean((fake - 1)^2)."""
    _check_finite("fake_scores", fake_scores)
    if isinstance(fake_scores, Tensor):
        f1 = fake_scores - 1.0
        return ad.mean_all(f1 * f1)
    return float(np.mean((np.asarray(fake_scores) - 1.0) ** 2))


def to_grayscale(img):
    """BT.601 luminance of an RGB image.

    Accepts H x W x 3 arrays (returns H x W) or B x 3 x H x W arrays/tensors
    (returns B x 1 x H x W).
    """
    shape = _data(img).shape
    if isinstance(img, Tensor):
        if img.data.ndim != 4 or shape[1] != 3:
            raise ShapeError(f"expected B x 3 x H x W tensor, got shape {shape}")
        r = ad.slice_channels(img, 0, 1)
        g = ad.slice_channels(img, 1, 2)
        b = ad.slice_channels(img, 2, 3)
        return r * GRAY_WEIGHTS[0] + g * GRAY_WEIGHTS[1] + b * GRAY_WEIGHTS[2]
    arr = np.asarray(img)
    if arr.ndim == 3 and arr.shape[-1] == 3:
        return (arr[..., 0] * GRAY_WEIGHTS[0]
                + arr[..., 1] * GRAY_WEIGHTS[1]
                + arr[..., 2] * GRAY_WEIGHTS[2])
    if arr.ndim == 4 and arr.shape[1] == 3:
        gray = (arr[:, 0] * GRAY_WEIGHTS[0]
                + arr[:, 1] * GRAY_WEIGHTS[1]
                + arr[:, 2] * GRAY_WEIGHTS[2])
        return gray[:, None]
    raise ShapeError(f"expected H x W x 3 or B x 3 x H x W image, got shape {shape}")


def _sobel_weight(kernel: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(kernel, dtype=dtype).reshape(1, 1, 3, 3))


def sobel_gradients(gray) -> GradientPair:
    """Valid-region edge responses of a grayscale map.

    Correlates the map with the two 3x3 kernels; no padding, so the output is
    (H-2) x (W-2) and border pixels never fabricate edge signal. Accepts
    H x W arrays or B x 1 x H x W arrays/tensors.
    """
    shape = _data(gray).shape
    if len(shape) not in (2, 4):
        raise ShapeError(f"expected H x W or B x 1 x H x W gray map, got shape {shape}")
    if len(shape) == 4 and shape[1] != 1:
        raise ShapeError(f"gray map must have one channel, got shape {shape}")
    h, w = shape[-2], shape[-1]
    if h < 3 or w < 3:
        raise ShapeError(f"gray map must be at least 3 x 3, got {h} x {w}")
    if isinstance(gray, Tensor):
        gx = ad.conv2d(gray, _sobel_weight(SOBEL_HORIZONTAL, gray.data.dtype))
        gy = ad.conv2d(gray, _sobel_weight(SOBEL_VERTICAL, gray.data.dtype))
        return GradientPair(gx, gy)
    arr = np.asarray(gray)
    squeeze = arr.ndim == 2
    planes = arr[None, None] if squeeze else arr
    windows = np.lib.stride_tricks.sliding_window_view(planes, (3, 3), axis=(-2, -1))
    gx = np.einsum("bchwuv,uv->bchw", windows, SOBEL_HORIZONTAL)
    gy = np.einsum("bchwuv,uv->bchw", windows, SOBEL_VERTICAL)
    if squeeze:
        return GradientPair(gx[0, 0], gy[0, 0])
    return GradientPair(gx, gy)


def gradient_magnitude(img):
    """Sobel gradient magnitude map of an RGB image's luminance."""
    gx, gy = sobel_gradients(to_grayscale(img))
    if isinstance(gx, Tensor):
        return ad.sqrt(gx * gx + gy * gy + MAGNITUDE_EPS)
    return np.sqrt(gx * gx + gy * gy + MAGNITUDE_EPS)


def contour_loss(img, mode: str = "literal", reference=None):
    """Mean Sobel gradient magnitude of an image's luminance.

    ``literal`` averages the magnitude map of ``img`` itself; ``matched``
    averages the absolute difference between the magnitude maps of ``img``
    and ``reference``, rewarding edge structure that agrees with the
    reference instead of penalizing all edges.
    """
    if mode not in CONTOUR_MODES:
        raise ParameterError(f"mode must be one of {CONTOUR_MODES}, got {mode!r}")
    _check_finite("img", img)
    if mode == "literal":
        mag = gradient_magnitude(img)
        if isinstance(mag, Tensor):
            return ad.mean_all(mag) - MAGNITUDE_FLOOR
        return float(np.mean(mag) - MAGNITUDE_FLOOR)
    if reference is None:
        raise ParameterError("matched mode requires a reference image")
    if _data(img).shape != _data(reference).shape:
        raise ShapeError(
            f"img and reference shapes differ: {_data(img).shape} vs "
            f"{_data(reference).shape}")
    _check_finite("reference", reference)
    if _any_tensor(img, reference):
        mag = gradient_magnitude(ad.as_tensor(img))
        ref_mag = gradient_magnitude(ad.as_tensor(reference))
        return ad.mean_all(ad.absolute(mag - ref_mag))
    return float(np.mean(np.abs(gradient_magnitude(img) - gradient_magnitude(reference))))


def total_loss(cyc, adv, contour, weights: LossWeights | None = None):
    """Weighted sum of the generator-side objective terms."""
    if weights is None:
        weights = LossWeights()
    for name, value in (("cyc", cyc), ("adv", adv), ("contour", contour)):
        if not np.all(np.isfinite(_data(value))):
            raise NumericError(f"{name} component is non-finite")
    if _any_tensor(cyc, adv, contour):
        total = (ad.as_tensor(cyc) * weights.lambda_cyc
                 + ad.as_tensor(adv) * weights.lambda_adv
                 + ad.as_tensor(contour) * weights.lambda_contour)
        return total
    return float(weights.lambda_cyc * cyc
                 + weights.lambda_adv * adv
                 + weights.lambda_contour * contour)
