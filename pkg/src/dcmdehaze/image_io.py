"""Image and depth-map file I/O.

8-bit PNG/JPEG pixels map linearly to [0, 1] floats. Depth fields persist
as single-channel 16-bit PNG; the scale factor that restores physical units
lives in the dataset manifest, next to the entry that references the file.
"""

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg"}


def load_image(path) -> np.ndarray:
    """Read an image file as H x W x 3 float32 in [0, 1]."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(img: np.ndarray, path) -> None:
    """Write H x W x 3 floats in [0, 1] as an 8-bit image; format by extension."""
    data = np.clip(np.asarray(img), 0.0, 1.0)
    quant = np.rint(data * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(quant, mode="RGB").save(path)


def save_depth(depth: np.ndarray, path, scale: float) -> None:
    """Write an H x W depth field as 16-bit PNG with values depth/scale*65535."""
    norm = np.asarray(depth, dtype=np.float64) / scale
    quant = np.rint(np.clip(norm, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(quant).save(path)


def load_depth(path, scale: float) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return (arr / 65535.0 * scale).astype(np.float32)


def list_images(directory) -> list:
    """Sorted image paths directly under a directory."""
    root = Path(directory)
    return sorted(p for p in root.iterdir()
                  if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
