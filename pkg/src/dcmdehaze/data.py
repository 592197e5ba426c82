"""Dataset construction, manifest bookkeeping, and unpaired batch sampling.

A dataset lives in one directory: ``hazy/``, ``clean/``, and ``depth/``
subdirectories holding 8-bit PNG images (depth as 16-bit PNG), described by a
``manifest.json`` at the root. Synthetic entries record full provenance --
clean source, depth field, scattering parameters -- but that pairing is used
only for evaluation: training batches draw the hazy and clean pools
independently and re-roll any draw that would hand a generator its own
ground truth.

Synthetic clean images are procedural (gradient background, seeded geometric
shapes, low-frequency value noise) so the whole corpus can be rebuilt
byte-identically from a seed. Scattering strength is capped so that the
deepest pixel keeps transmission near 0.3, which keeps file-quantization
error after analytic haze inversion within 1e-2.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import DatasetError, ParameterError, ShapeError
from .haze import (DEPTH_KINDS, HazeParams, _bilinear_upsample,
                   generate_depth_field, synthesize_haze)
from .image_io import (IMAGE_EXTENSIONS, load_depth, load_image, save_depth,
                       save_image)

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
VALID_SPLITS = ("train", "test")
DEFAULT_BETA_RANGE = (0.4, 2.0)
DEFAULT_AIRLIGHT_RANGE = (0.7, 1.0)
# Scattering-depth product at the deepest pixel; exp(-1.2) ~ 0.30 transmission.
MAX_OPTICAL_DEPTH = 1.2


@dataclass(frozen=True)
class DatasetEntry:
    """One image record; synthetic records carry full provenance."""

    entry_id: str
    hazy: str | None = None
    clean: str | None = None
    depth: str | None = None
    depth_scale: float | None = None
    params: HazeParams | None = None

    def __post_init__(self):
        if not self.entry_id:
            raise DatasetError("entry id must be a non-empty string")
        if self.hazy is None and self.clean is None:
            raise DatasetError(f"entry '{self.entry_id}' lists no image at all")
        if self.depth is not None and self.depth_scale is None:
            raise DatasetError(
                f"entry '{self.entry_id}' has a depth map but no depth scale")
        if self.params is not None and (self.clean is None or self.depth is None):
            raise DatasetError(
                f"synthetic entry '{self.entry_id}' must record clean + depth + params")

    @property
    def is_synthetic(self) -> bool:
        return self.params is not None


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable description of one dataset directory."""

    root: Path
    split: str
    entries: tuple
    seed: int
    version: int = MANIFEST_VERSION
    skipped: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "entries", tuple(self.entries))
        object.__setattr__(self, "skipped", tuple(self.skipped))
        if self.split not in VALID_SPLITS:
            raise DatasetError(f"split must be one of {VALID_SPLITS}, got {self.split!r}")
        ids = [e.entry_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate entry ids: {dupes}")

    def resolve(self, relative) -> Path:
        path = Path(relative)
        return path if path.is_absolute() else self.root / path

    @property
    def hazy_entries(self) -> tuple:
        return tuple(e for e in self.entries if e.hazy is not None)

    @property
    def clean_entries(self) -> tuple:
        return tuple(e for e in self.entries if e.clean is not None)


@dataclass(frozen=True)
class Batch:
    """One training batch; hazy and clean are drawn independently."""

    hazy: np.ndarray
    clean: np.ndarray
    hazy_ids: tuple
    clean_ids: tuple


# --------------------------------------------------------------------------
# manifest serialization


def _entry_to_json(entry: DatasetEntry) -> dict:
    record = {"id": entry.entry_id}
    for key in ("hazy", "clean", "depth"):
        value = getattr(entry, key)
        if value is not None:
            record[key] = str(value)
    if entry.depth_scale is not None:
        record["depth_scale"] = float(entry.depth_scale)
    if entry.params is not None:
        record["params"] = {
            "beta": float(entry.params.beta),
            "airlight": [float(a) for a in entry.params.airlight],
        }
    return record


def _entry_from_json(record: dict) -> DatasetEntry:
    params = None
    if "params" in record:
        raw = record["params"]
        params = HazeParams(beta=raw["beta"], airlight=np.asarray(raw["airlight"]))
    return DatasetEntry(
        entry_id=record["id"],
        hazy=record.get("hazy"),
        clean=record.get("clean"),
        depth=record.get("depth"),
        depth_scale=record.get("depth_scale"),
        params=params,
    )


def save_manifest(manifest: DatasetManifest) -> Path:
    """Write manifest.json at the dataset root; returns its path."""
    path = manifest.root / MANIFEST_NAME
    document = {
        "version": manifest.version,
        "split": manifest.split,
        "seed": manifest.seed,
        "entries": [_entry_to_json(e) for e in manifest.entries],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(document, fh, indent=2)
        fh.write("\n")
    return path


def load_manifest(root) -> DatasetManifest:
    """Read and validate a dataset manifest; every listed file must exist."""
    root = Path(root)
    path = root if root.name.endswith(".json") else root / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"no manifest found at {path}")
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"unreadable manifest {path}: {exc}")
    if document.get("version") != MANIFEST_VERSION:
        raise DatasetError(
            f"unsupported manifest version {document.get('version')!r} in {path}")
    try:
        entries = tuple(_entry_from_json(r) for r in document["entries"])
        manifest = DatasetManifest(root=path.parent, split=document["split"],
                                   entries=entries, seed=int(document["seed"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed manifest {path}: {exc!r}")
    for entry in manifest.entries:
        for key in ("hazy", "clean", "depth"):
            value = getattr(entry, key)
            if value is not None and not manifest.resolve(value).exists():
                raise DatasetError(
                    f"entry '{entry.entry_id}' references missing file {value}")
    return manifest


# --------------------------------------------------------------------------
# synthetic dataset construction


def _procedural_clean(h: int, w: int, rng) -> np.ndarray:
    """Gradient background + random shapes + value noise, in [0, 1]."""
    lo, hi = rng.uniform(0.05, 0.95, 3), rng.uniform(0.05, 0.95, 3)
    theta = rng.uniform(0.0, 2.0 * math.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    proj = math.cos(theta) * (xx / max(w - 1, 1)) + math.sin(theta) * (yy / max(h - 1, 1))
    proj = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)
    img = lo[None, None, :] + proj[:, :, None] * (hi - lo)[None, None, :]

    for _ in range(int(rng.integers(3, 7))):
        color = rng.uniform(0.05, 0.95, 3)
        alpha = float(rng.uniform(0.6, 1.0))
        if rng.random() < 0.5:
            y0 = int(rng.integers(0, h - 2))
            x0 = int(rng.integers(0, w - 2))
            y1 = y0 + int(rng.integers(2, max(3, h // 2)))
            x1 = x0 + int(rng.integers(2, max(3, w // 2)))
            mask = np.zeros((h, w), dtype=bool)
            mask[y0:y1, x0:x1] = True
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            radius = rng.uniform(min(h, w) / 10.0, min(h, w) / 3.0)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
        img[mask] = (1.0 - alpha) * img[mask] + alpha * color

    grid = rng.random((max(2, h // 8), max(2, w // 8)))
    noise = _bilinear_upsample(grid, h, w)
    img = img + (noise[:, :, None] - 0.5) * 0.12
    return np.clip(img, 0.0, 1.0)


def build_synthetic_dataset(root, n: int, size: int,
                            beta_range=DEFAULT_BETA_RANGE,
                            airlight_range=DEFAULT_AIRLIGHT_RANGE,
                            seed: int = 0, split: str = "train") -> DatasetManifest:
    """Generate n clean/depth/hazy triples plus a manifest under root.

    Fully deterministic for fixed arguments: images and manifest are
    byte-identical across runs. Scattering is sampled log-uniform over
    beta_range, airlight uniform per channel over airlight_range; each depth
    field is rescaled to the fixed optical-depth budget so analytic inversion
    stays well-conditioned.
    """
    if n < 2:
        raise ParameterError(f"need at least 2 images, got {n}")
    if size < 16:
        raise ParameterError(f"image size must be at least 16, got {size}")
    b_lo, b_hi = float(beta_range[0]), float(beta_range[1])
    if not (0.0 < b_lo <= b_hi):
        raise ParameterError(f"invalid beta range {beta_range}")
    a_lo, a_hi = float(airlight_range[0]), float(airlight_range[1])
    if not (0.0 <= a_lo <= a_hi <= 1.0):
        raise ParameterError(f"invalid airlight range {airlight_range}")

    root = Path(root)
    for sub in ("hazy", "clean", "depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n):
        entry_id = f"{i:06d}"
        clean = _procedural_clean(size, size, rng)
        kind = DEPTH_KINDS[int(rng.integers(len(DEPTH_KINDS)))]
        depth_seed = int(rng.integers(2 ** 31))
        beta = float(np.exp(rng.uniform(math.log(b_lo), math.log(b_hi))))
        airlight = rng.uniform(a_lo, a_hi, 3)
        depth = generate_depth_field(kind, size, size, depth_seed,
                                     d_max=MAX_OPTICAL_DEPTH / beta)
        params = HazeParams(beta=beta, airlight=airlight)
        hazy = synthesize_haze(clean, depth, params)

        save_image(clean, root / "clean" / f"{entry_id}.png")
        save_image(hazy, root / "hazy" / f"{entry_id}.png")
        depth_scale = float(depth.max())
        save_depth(depth, root / "depth" / f"{entry_id}.png", depth_scale)
        entries.append(DatasetEntry(
            entry_id=entry_id,
            hazy=f"hazy/{entry_id}.png",
            clean=f"clean/{entry_id}.png",
            depth=f"depth/{entry_id}.png",
            depth_scale=depth_scale,
            params=params,
        ))

    manifest = DatasetManifest(root=root, split=split, entries=tuple(entries),
                               seed=seed)
    save_manifest(manifest)
    return manifest


# --------------------------------------------------------------------------
# unpaired ingestion


def _readable_images(directory: Path, skipped: list) -> list:
    found = []
    for path in sorted(p for p in directory.iterdir() if p.is_file()):
        if path.suffix.lower() not in IMAGE_EXTENSIONS:
            warnings.warn(f"skipping non-image file {path}", stacklevel=3)
            skipped.append(str(path))
            continue
        try:
            load_image(path)
        except Exception as exc:
            warnings.warn(f"skipping unreadable image {path}: {exc}", stacklevel=3)
            skipped.append(str(path))
            continue
        found.append(path)
    return found


def load_unpaired(hazy_dir, clean_dir) -> DatasetManifest:
    """Build a manifest with independent hazy and clean pools.

    The two directories need not be related; no pairing between them is
    constructed or implied. Non-image and unreadable files are skipped with
    a warning and recorded in the manifest's skipped list.
    """
    hazy_dir, clean_dir = Path(hazy_dir), Path(clean_dir)
    for directory in (hazy_dir, clean_dir):
        if not directory.is_dir():
            raise DatasetError(f"not a directory: {directory}")
    skipped = []
    hazy_files = _readable_images(hazy_dir, skipped)
    clean_files = _readable_images(clean_dir, skipped)
    if not hazy_files:
        raise DatasetError(f"no readable images in hazy directory {hazy_dir}")
    if not clean_files:
        raise DatasetError(f"no readable images in clean directory {clean_dir}")
    entries = [DatasetEntry(entry_id=f"hazy/{p.name}", hazy=str(p.resolve()))
               for p in hazy_files]
    entries += [DatasetEntry(entry_id=f"clean/{p.name}", clean=str(p.resolve()))
                for p in clean_files]
    return DatasetManifest(root=hazy_dir.parent, split="train",
                           entries=tuple(entries), seed=0, skipped=tuple(skipped))


# --------------------------------------------------------------------------
# batch sampling


@lru_cache(maxsize=256)
def _cached_image(path_str: str) -> np.ndarray:
    img = load_image(path_str)
    img.setflags(write=False)
    return img


def crop_offsets(rng, height: int, width: int, crop: int) -> tuple:
    """Uniform top-left corner of a crop x crop window inside height x width."""
    y = int(rng.integers(0, height - crop + 1))
    x = int(rng.integers(0, width - crop + 1))
    return y, x


def _sample_patch(entry: DatasetEntry, side: str, manifest: DatasetManifest,
                  crop: int, rng, augment: bool, allow_upscale: bool) -> np.ndarray:
    img = _cached_image(str(manifest.resolve(getattr(entry, side))))
    h, w = img.shape[:2]
    if min(h, w) < crop:
        if not allow_upscale:
            raise ShapeError(
                f"image '{entry.entry_id}' is {h} x {w}, smaller than crop {crop}")
        factor = -(-crop // min(h, w))
        warnings.warn(
            f"upscaling image '{entry.entry_id}' by {factor}x to fit crop {crop}")
        img = np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)
        h, w = img.shape[:2]
    y, x = crop_offsets(rng, h, w, crop)
    patch = img[y:y + crop, x:x + crop]
    if augment and rng.random() < 0.5:
        patch = patch[:, ::-1]
    return np.ascontiguousarray(patch.transpose(2, 0, 1), dtype=np.float32)


def sample_batch(manifest: DatasetManifest, batch_size: int, crop: int,
                 seed: int, step: int, augment: bool = True,
                 allow_upscale: bool = True) -> Batch:
    """Draw one unpaired batch, a pure function of (manifest, seed, step).

    Hazy and clean images are drawn independently with replacement, each with
    its own uniform crop and optional horizontal flip. When a clean draw would
    return the provenance partner of the hazy draw in the same slot (possible
    only for synthetic entries), it is re-rolled.
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    if crop < 1:
        raise ParameterError(f"crop must be >= 1, got {crop}")
    hazy_pool = manifest.hazy_entries
    clean_pool = manifest.clean_entries
    if not hazy_pool or not clean_pool:
        raise DatasetError("manifest must contain both hazy and clean images")

    rng = np.random.default_rng([seed, step])
    hazy_patches, hazy_ids = [], []
    for _ in range(batch_size):
        entry = hazy_pool[int(rng.integers(len(hazy_pool)))]
        hazy_patches.append(_sample_patch(entry, "hazy", manifest, crop, rng,
                                          augment, allow_upscale))
        hazy_ids.append(entry.entry_id)

    clean_patches, clean_ids = [], []
    for slot in range(batch_size):
        entry = clean_pool[int(rng.integers(len(clean_pool)))]
        while (entry.entry_id == hazy_ids[slot] and entry.is_synthetic
               and len(clean_pool) > 1):
            entry = clean_pool[int(rng.integers(len(clean_pool)))]
        clean_patches.append(_sample_patch(entry, "clean", manifest, crop, rng,
                                           augment, allow_upscale))
        clean_ids.append(entry.entry_id)

    return Batch(hazy=np.stack(hazy_patches), clean=np.stack(clean_patches),
                 hazy_ids=tuple(hazy_ids), clean_ids=tuple(clean_ids))


def load_entry_clean(manifest: DatasetManifest, entry: DatasetEntry) -> np.ndarray:
    """Clean image of an entry as H x W x 3 float32."""
    if entry.clean is None:
        raise DatasetError(f"entry '{entry.entry_id}' has no clean image")
    return load_image(manifest.resolve(entry.clean))


def load_entry_hazy(manifest: DatasetManifest, entry: DatasetEntry) -> np.ndarray:
    if entry.hazy is None:
        raise DatasetError(f"entry '{entry.entry_id}' has no hazy image")
    return load_image(manifest.resolve(entry.hazy))


def load_entry_depth(manifest: DatasetManifest, entry: DatasetEntry) -> np.ndarray:
    if entry.depth is None:
        raise DatasetError(f"entry '{entry.entry_id}' has no depth map")
    return load_depth(manifest.resolve(entry.depth), entry.depth_scale)
