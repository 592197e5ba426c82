"""Full-reference image quality metrics: PSNR, SSIM, CIEDE2000.

All metrics take unit-range float images (H x W x 3 channel-last; SSIM also
accepts an H x W luminance map). PSNR uses a fixed peak of 1.0. SSIM is the
standard single-scale index on BT.601 luminance with an 11 x 11 Gaussian
window (sigma 1.5), evaluated only at window positions fully inside the
image. CIEDE2000 converts sRGB (D65 white point) to CIELAB and averages the
full color-difference formula, including its hue-rotation term, over pixels.

``evaluate_pairs`` scores a directory of predictions against ground truth by
filename stem and writes CSV/JSON reports; identical images produce an
infinity PSNR, serialized as the string "inf".
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ShapeError, ValidationError
from .image_io import list_images, load_image
from .losses import to_grayscale

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# Linear sRGB -> XYZ matrix (Rec. 709 primaries as published in the original
# sRGB specification) and the D65 2-degree white point.
_RGB_TO_XYZ = np.array([[0.412453, 0.357580, 0.180423],
                        [0.212671, 0.715160, 0.072169],
                        [0.019334, 0.119193, 0.950227]])
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])


def _check_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape:
        raise ShapeError(f"image shapes differ: {xa.shape} vs {ya.shape}")
    if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(ya))):
        raise ValidationError("images contain non-finite values")
    return xa, ya


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB against a unit-range peak.

    Identical images have zero error and return ``float('inf')``.
    """
    xa, ya = _check_pair(x, y)
    mse = float(np.mean((xa - ya) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window() -> np.ndarray:
    radius = SSIM_WINDOW // 2
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    one_d = np.exp(-(offsets ** 2) / (2.0 * SSIM_SIGMA ** 2))
    one_d /= one_d.sum()
    return np.outer(one_d, one_d)


def _luminance(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3 and img.shape[-1] == 3:
        return to_grayscale(img)
    if img.ndim == 2:
        return img
    raise ShapeError(f"expected H x W x 3 or H x W image, got shape {img.shape}")


def ssim(x, y) -> float:
    """Mean structural similarity over all fully interior window positions."""
    xa, ya = _check_pair(x, y)
    lx = _luminance(xa)
    ly = _luminance(ya)
    h, w = lx.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ShapeError(
            f"image must be at least {SSIM_WINDOW} x {SSIM_WINDOW}, got {h} x {w}")
    window = _gaussian_window()

    def local_mean(arr):
        views = np.lib.stride_tricks.sliding_window_view(arr, window.shape)
        return np.einsum("hwuv,uv->hw", views, window)

    ux = local_mean(lx)
    uy = local_mean(ly)
    uxx = local_mean(lx * lx)
    uyy = local_mean(ly * ly)
    uxy = local_mean(lx * ly)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    score = ((2.0 * ux * uy + SSIM_C1) * (2.0 * vxy + SSIM_C2)
             / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2)))
    return float(np.mean(score))


def srgb_to_lab(img) -> np.ndarray:
    """Convert unit-range sRGB (..., 3) to CIELAB under the D65 illuminant."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.shape[-1] != 3:
        raise ShapeError(f"expected 3 channels last, got shape {arr.shape}")
    srgb = np.clip(arr, 0.0, 1.0)
    linear = np.where(srgb <= 0.04045, srgb / 12.92,
                      ((srgb + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _RGB_TO_XYZ.T
    ratio = xyz / _WHITE_D65
    delta = 6.0 / 29.0
    f = np.where(ratio > delta ** 3, np.cbrt(ratio),
                 ratio / (3.0 * delta ** 2) + 4.0 / 29.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def delta_e_ciede2000(lab1, lab2) -> np.ndarray:
    """Elementwise CIEDE2000 color difference between Lab arrays (..., 3)."""
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    if lab1.shape != lab2.shape or lab1.shape[-1] != 3:
        raise ShapeError(
            f"Lab arrays must share a (..., 3) shape: {lab1.shape} vs {lab2.shape}")
    l1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    l2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    c1 = np.hypot(a1, b1)
    c2 = np.hypot(a2, b2)
    c_bar = 0.5 * (c1 + c2)
    g = 0.5 * (1.0 - np.sqrt(c_bar ** 7 / (c_bar ** 7 + 25.0 ** 7)))
    a1p = (1.0 + g) * a1
    a2p = (1.0 + g) * a2
    c1p = np.hypot(a1p, b1)
    c2p = np.hypot(a2p, b2)
    h1p = np.where((a1p == 0.0) & (b1 == 0.0), 0.0,
                   np.degrees(np.arctan2(b1, a1p)) % 360.0)
    h2p = np.where((a2p == 0.0) & (b2 == 0.0), 0.0,
                   np.degrees(np.arctan2(b2, a2p)) % 360.0)

    dl = l2 - l1
    dc = c2p - c1p
    zero_chroma = (c1p * c2p) == 0.0
    dh = h2p - h1p
    dh = np.where(dh > 180.0, dh - 360.0, dh)
    dh = np.where(dh < -180.0, dh + 360.0, dh)
    dh = np.where(zero_chroma, 0.0, dh)
    dbig_h = 2.0 * np.sqrt(c1p * c2p) * np.sin(np.radians(dh) / 2.0)

    l_bar = 0.5 * (l1 + l2)
    cp_bar = 0.5 * (c1p + c2p)
    h_sum = h1p + h2p
    h_diff = np.abs(h1p - h2p)
    h_bar = np.where(h_diff <= 180.0, 0.5 * h_sum,
                     np.where(h_sum < 360.0, 0.5 * (h_sum + 360.0),
                              0.5 * (h_sum - 360.0)))
    h_bar = np.where(zero_chroma, h_sum, h_bar)

    t = (1.0
         - 0.17 * np.cos(np.radians(h_bar - 30.0))
         + 0.24 * np.cos(np.radians(2.0 * h_bar))
         + 0.32 * np.cos(np.radians(3.0 * h_bar + 6.0))
         - 0.20 * np.cos(np.radians(4.0 * h_bar - 63.0)))
    delta_theta = 30.0 * np.exp(-(((h_bar - 275.0) / 25.0) ** 2))
    rc = 2.0 * np.sqrt(cp_bar ** 7 / (cp_bar ** 7 + 25.0 ** 7))
    sl = 1.0 + 0.015 * (l_bar - 50.0) ** 2 / np.sqrt(20.0 + (l_bar - 50.0) ** 2)
    sc = 1.0 + 0.045 * cp_bar
    sh = 1.0 + 0.015 * cp_bar * t
    rt = -np.sin(np.radians(2.0 * delta_theta)) * rc

    term_l = dl / sl
    term_c = dc / sc
    term_h = dbig_h / sh
    return np.sqrt(term_l ** 2 + term_c ** 2 + term_h ** 2
                   + rt * term_c * term_h)


def ciede2000(x, y) -> float:
    """Mean CIEDE2000 color difference between two sRGB images."""
    xa, ya = _check_pair(x, y)
    if xa.ndim != 3 or xa.shape[-1] != 3:
        raise ShapeError(f"expected H x W x 3 images, got shape {xa.shape}")
    return float(np.mean(delta_e_ciede2000(srgb_to_lab(xa), srgb_to_lab(ya))))


@dataclass
class MetricReport:
    """Per-image metric rows plus their arithmetic means and pairing errors."""

    per_image: list = field(default_factory=list)  # (id, psnr_db, ssim, ciede2000)
    aggregate: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)

    @staticmethod
    def _serialize(value):
        return "inf" if math.isinf(value) else value

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "psnr_db", "ssim", "ciede2000"])
            for image_id, p, s, c in self.per_image:
                writer.writerow([image_id, self._serialize(p), s, c])

    def write_json(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "per_image": [
                {"id": image_id, "psnr_db": self._serialize(p),
                 "ssim": s, "ciede2000": c}
                for image_id, p, s, c in self.per_image
            ],
            "aggregate": {k: self._serialize(v) for k, v in self.aggregate.items()},
            "errors": list(self.errors),
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")


def evaluate_pairs(pred_dir, gt_dir, out_csv=None, out_json=None) -> MetricReport:
    """Score every prediction against the ground-truth image sharing its stem.

    Files present in only one directory are listed under ``errors`` and
    excluded from the aggregate. Reports are written as CSV and JSON beside
    ``pred_dir`` unless explicit paths are given.
    """
    pred_dir = Path(pred_dir)
    gt_dir = Path(gt_dir)
    preds = {p.stem: p for p in list_images(pred_dir)}
    gts = {p.stem: p for p in list_images(gt_dir)}

    report = MetricReport()
    for stem in sorted(set(preds) - set(gts)):
        report.errors.append(f"prediction {preds[stem].name} has no ground-truth partner")
    for stem in sorted(set(gts) - set(preds)):
        report.errors.append(f"ground truth {gts[stem].name} has no prediction")

    for stem in sorted(set(preds) & set(gts)):
        pred = load_image(preds[stem])
        gt = load_image(gts[stem])
        report.per_image.append(
            (stem, psnr(pred, gt), ssim(pred, gt), ciede2000(pred, gt)))

    if report.per_image:
        columns = list(zip(*report.per_image))
        report.aggregate = {
            "psnr_db": float(np.mean(columns[1])),
            "ssim": float(np.mean(columns[2])),
            "ciede2000": float(np.mean(columns[3])),
        }

    stem_base = pred_dir.parent / f"{pred_dir.name}_metrics"
    report.write_csv(out_csv if out_csv is not None else stem_base.with_suffix(".csv"))
    report.write_json(out_json if out_json is not None else stem_base.with_suffix(".json"))
    return report
