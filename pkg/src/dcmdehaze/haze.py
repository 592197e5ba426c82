"""Atmospheric scattering physics for synthesizing and inverting haze.

The image formation model is

    hazy = clean * t + A * (1 - t),      t = exp(-beta * depth)

with per-channel global atmospheric light A and scattering coefficient
beta. All operations are pure functions; images are H x W x 3 floats in
[0, 1] and depth fields are H x W nonnegative floats.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTransmissionError, ParameterError, ShapeError, ValidationError

DEPTH_KINDS = ("ramp_h", "ramp_v", "radial", "smooth_noise")
DEFAULT_T_FLOOR = 0.05
DEFAULT_D_MAX = 3.0


@dataclass(frozen=True)
class HazeParams:
    """Scattering coefficient and global atmospheric light."""

    beta: float
    airlight: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        object.__setattr__(self, "airlight", np.asarray(self.airlight, dtype=np.float64))
        if not np.isfinite(self.beta) or self.beta <= 0:
            raise ParameterError(f"beta must be a positive finite number, got {self.beta}")
        if self.airlight.shape != (3,):
            raise ShapeError(f"airlight must be a 3-vector, got shape {self.airlight.shape}")
        if not np.all(np.isfinite(self.airlight)):
            raise ValidationError("airlight has non-finite entries")
        if np.any(self.airlight < 0) or np.any(self.airlight > 1):
            raise ParameterError("airlight channels must lie in [0, 1]")


def _check_image(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"image must be H x W x 3, got shape {img.shape}")
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise ShapeError(f"image must be at least 3 x 3, got {img.shape[:2]}")
    if not np.all(np.isfinite(img)):
        raise ValidationError("image has non-finite values")
    return img


def _check_depth(depth) -> np.ndarray:
    depth = np.asarray(depth)
    if depth.ndim != 2:
        raise ShapeError(f"depth field must be H x W, got shape {depth.shape}")
    if not np.all(np.isfinite(depth)):
        raise ValidationError("depth field has non-finite values")
    if np.any(depth < 0):
        raise ValidationError("depth field has negative values")
    return depth


def transmission(depth, beta: float) -> np.ndarray:
    """Elementwise t = exp(-beta * depth); values in (0, 1]."""
    depth = _check_depth(depth)
    if not np.isfinite(beta) or beta <= 0:
        raise ParameterError(f"beta must be a positive finite number, got {beta}")
    return np.exp(-beta * depth.astype(np.float64))


def synthesize_haze(clean, depth, params: HazeParams) -> np.ndarray:
    """Apply the scattering model per channel and clamp the result to [0, 1]."""
    clean = _check_image(clean)
    depth = _check_depth(depth)
    if clean.shape[:2] != depth.shape:
        raise ShapeError(f"image {clean.shape[:2]} and depth {depth.shape} are misaligned")
    t = transmission(depth, params.beta)[:, :, None]
    hazy = clean.astype(np.float64) * t + params.airlight[None, None, :] * (1.0 - t)
    return np.clip(hazy, 0.0, 1.0)


def invert_haze(hazy, depth, params: HazeParams, t_floor: float = DEFAULT_T_FLOOR) -> np.ndarray:
    """Analytic inverse clean = (hazy - A*(1-t)) / t, clamped to [0, 1].

    Raises DegenerateTransmissionError when any t drops below t_floor, where
    the division amplifies noise past float usefulness.
    """
    hazy = _check_image(hazy)
    depth = _check_depth(depth)
    if hazy.shape[:2] != depth.shape:
        raise ShapeError(f"image {hazy.shape[:2]} and depth {depth.shape} are misaligned")
    if t_floor <= 0:
        raise ParameterError(f"t_floor must be positive, got {t_floor}")
    t = transmission(depth, params.beta)
    tmin = t.min()
    if tmin < t_floor:
        raise DegenerateTransmissionError(
            f"transmission floor violated: min t = {tmin:.6g} < {t_floor}")
    t = t[:, :, None]
    clean = (hazy.astype(np.float64) - params.airlight[None, None, :] * (1.0 - t)) / t
    return np.clip(clean, 0.0, 1.0)


def _bilinear_upsample(grid: np.ndarray, h: int, w: int) -> np.ndarray:
    gh, gw = grid.shape
    # Sample positions map the coarse grid corners onto the output corners.
    ys = np.linspace(0.0, gh - 1.0, h)
    xs = np.linspace(0.0, gw - 1.0, w)
    y0 = np.clip(np.floor(ys).astype(int), 0, gh - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = grid[np.ix_(y0, x0)]
    b = grid[np.ix_(y0, x0 + 1)]
    c = grid[np.ix_(y0 + 1, x0)]
    d = grid[np.ix_(y0 + 1, x0 + 1)]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def generate_depth_field(kind: str, h: int, w: int, seed: int,
                         d_max: float = DEFAULT_D_MAX) -> np.ndarray:
    """Deterministic synthetic depth field in [0, d_max], one of DEPTH_KINDS."""
    if h < 3 or w < 3:
        raise ShapeError(f"depth field must be at least 3 x 3, got {h} x {w}")
    if d_max <= 0:
        raise ParameterError(f"d_max must be positive, got {d_max}")
    if kind == "ramp_h":
        field_ = np.tile(np.linspace(0.0, d_max, w)[None, :], (h, 1))
    elif kind == "ramp_v":
        field_ = np.tile(np.linspace(0.0, d_max, h)[:, None], (1, w))
    elif kind == "radial":
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        yy, xx = np.mgrid[0:h, 0:w]
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        field_ = r / r.max() * d_max
    elif kind == "smooth_noise":
        rng = np.random.default_rng(seed)
        gh = max(2, round(h / 16))
        gw = max(2, round(w / 16))
        grid = rng.random((gh, gw))
        field_ = _bilinear_upsample(grid, h, w)
        field_ = (field_ - field_.min()) / (field_.max() - field_.min()) * d_max
    else:
        raise ParameterError(f"unknown depth field kind '{kind}', expected one of {DEPTH_KINDS}")
    return field_.astype(np.float64)
