"""Generators, discriminators, and the on-disk weight archive format.

The generator is a residual encoder-decoder: two stride-2 downsamplings, a
stack of residual stages (each optionally followed by a gated depthwise
modulation block), an optional feature-refinement block at the bottleneck, an
optional attention fusion of the bottleneck with edge-magnitude features of
the input, then two nearest-neighbor upsamplings and a tail convolution whose
output is added to the (rescaled) input before the tanh, so the network
predicts a correction; the result is rescaled to [0, 1]. The discriminator
scores overlapping patches through four
stride-2 convolutions and a final 1x1 convolution, with no output squashing.

Weight archives pair a binary tensor container (.npz) with a JSON manifest
recording the architecture configuration, the toggle set, and an integrity
hash; the loader rejects archives whose manifest or hash does not match.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Module, ModuleList, Tensor
from .blocks import (AttentionFusion, FeatureRefinementBlock,
                     GatedDepthwiseBlock, ResidualBlock)
from .errors import (CheckpointError, CheckpointIncompatibleError,
                     CheckpointIntegrityError, ParameterError, ShapeError)
from .layers import Conv2d, InstanceNorm2d
from .losses import MAGNITUDE_EPS, SOBEL_HORIZONTAL, SOBEL_VERTICAL, to_grayscale

WEIGHT_FORMAT_VERSION = 1
TOGGLE_NAMES = ("ddscm", "dfre", "ffm")


@dataclass(frozen=True)
class GeneratorConfig:
    """Architecture sizing and module toggles for one generator."""

    in_channels: int = 3
    out_channels: int = 3
    base_channels: int = 64
    n_stages: int = 6
    rdb_growth: int = 32
    rdb_layers: int = 4
    ffm_reduction: int = 4
    use_ddscm: bool = True
    use_dfre: bool = True
    use_ffm: bool = True
    use_gate_activation: bool = True

    def __post_init__(self):
        for name in ("in_channels", "out_channels", "base_channels", "n_stages",
                     "rdb_growth", "rdb_layers", "ffm_reduction"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ParameterError(f"{name} must be a positive integer, got {value!r}")
        if self.rdb_layers < 2:
            raise ParameterError(f"rdb_layers must be >= 2, got {self.rdb_layers}")
        if self.in_channels != self.out_channels:
            raise ParameterError(
                "in_channels must equal out_channels (the generator adds the "
                f"input to the tail logits), got {self.in_channels} != "
                f"{self.out_channels}")

    @property
    def toggles(self) -> dict:
        return {"ddscm": self.use_ddscm, "dfre": self.use_dfre, "ffm": self.use_ffm}

    def with_toggles(self, ddscm=None, dfre=None, ffm=None) -> "GeneratorConfig":
        updates = {}
        if ddscm is not None:
            updates["use_ddscm"] = bool(ddscm)
        if dfre is not None:
            updates["use_dfre"] = bool(dfre)
        if ffm is not None:
            updates["use_ffm"] = bool(ffm)
        return replace(self, **updates)


@dataclass(frozen=True)
class DiscriminatorConfig:
    """Architecture sizing for one patch discriminator."""

    in_channels: int = 3
    base_channels: int = 64

    def __post_init__(self):
        for name in ("in_channels", "base_channels"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ParameterError(f"{name} must be a positive integer, got {value!r}")


class _EdgeFeatureStem(Module):
    """Edge-magnitude features of the network input at bottleneck resolution.

    The Sobel responses are computed with replicate same-padding so the map
    keeps the input's spatial size, then two stride-2 convolutions bring it
    to a quarter of the resolution at the bottleneck channel width.
    """

    def __init__(self, mid_channels, out_channels, rng):
        super().__init__()
        self.down1 = Conv2d(1, mid_channels, 3, rng, stride=2, padding=1)
        self.norm1 = InstanceNorm2d(mid_channels)
        self.down2 = Conv2d(mid_channels, out_channels, 3, rng, stride=2, padding=1)
        self.norm2 = InstanceNorm2d(out_channels)

    def __call__(self, img):
        gray = to_grayscale(img)
        dtype = gray.data.dtype
        gx = ad.conv2d(gray, Tensor(SOBEL_HORIZONTAL.astype(dtype).reshape(1, 1, 3, 3)),
                       padding=1, pad_mode="replicate")
        gy = ad.conv2d(gray, Tensor(SOBEL_VERTICAL.astype(dtype).reshape(1, 1, 3, 3)),
                       padding=1, pad_mode="replicate")
        magnitude = ad.sqrt(gx * gx + gy * gy + MAGNITUDE_EPS)
        h = ad.relu(self.norm1(self.down1(magnitude)))
        return ad.relu(self.norm2(self.down2(h)))


class Generator(Module):
    """Residual encoder-decoder mapping unit-range images to unit-range images."""

    def __init__(self, config: GeneratorConfig, rng):
        super().__init__()
        self.config = config
        base = config.base_channels
        bottleneck = base * 4

        self.head = Conv2d(config.in_channels, base, 7, rng, padding=3)
        self.head_norm = InstanceNorm2d(base)
        self.down1 = Conv2d(base, base * 2, 3, rng, stride=2, padding=1)
        self.down1_norm = InstanceNorm2d(base * 2)
        self.down2 = Conv2d(base * 2, bottleneck, 3, rng, stride=2, padding=1)
        self.down2_norm = InstanceNorm2d(bottleneck)

        self.stages = ModuleList(ResidualBlock(bottleneck, rng)
                                 for _ in range(config.n_stages))
        if config.use_ddscm:
            self.modulations = ModuleList(
                GatedDepthwiseBlock(bottleneck, rng, config.use_gate_activation)
                for _ in range(config.n_stages))
        if config.use_dfre:
            self.refiner = FeatureRefinementBlock(
                bottleneck, config.rdb_growth, config.rdb_layers, rng)
        if config.use_ffm:
            self.edge_stem = _EdgeFeatureStem(base * 2, bottleneck, rng)
            self.fusion = AttentionFusion(bottleneck, rng, config.ffm_reduction)

        self.up1 = Conv2d(bottleneck, base * 2, 3, rng, padding=1)
        self.up1_norm = InstanceNorm2d(base * 2)
        self.up2 = Conv2d(base * 2, base, 3, rng, padding=1)
        self.up2_norm = InstanceNorm2d(base)
        self.tail = Conv2d(base, config.out_channels, 7, rng, padding=3)

    def __call__(self, img):
        x = ad.as_tensor(img)
        if x.data.ndim != 4 or x.data.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected B x {self.config.in_channels} x H x W input, "
                f"got shape {tuple(x.data.shape)}")
        h_dim, w_dim = x.data.shape[2], x.data.shape[3]
        if h_dim % 4 != 0 or w_dim % 4 != 0:
            raise ShapeError(
                f"input spatial dims must be divisible by 4, got {h_dim} x {w_dim}")

        scaled = x * 2.0 - 1.0
        h = ad.relu(self.head_norm(self.head(scaled)))
        h = ad.relu(self.down1_norm(self.down1(h)))
        h = ad.relu(self.down2_norm(self.down2(h)))

        for i, stage in enumerate(self.stages):
            h = stage(h)
            if self.config.use_ddscm:
                h = self.modulations[i](h)
        if self.config.use_dfre:
            h = self.refiner(h)
        if self.config.use_ffm:
            h = self.fusion(h, self.edge_stem(x))

        h = ad.relu(self.up1_norm(self.up1(ad.upsample2x(h))))
        h = ad.relu(self.up2_norm(self.up2(ad.upsample2x(h))))
        # The tail predicts a correction on top of the input: every instance
        # norm above discards per-image global intensity, and without this
        # skip the decoder would have to reconstruct it from scratch.
        h = ad.tanh(self.tail(h) + scaled)
        return (h + 1.0) * 0.5


class Discriminator(Module):
    """Patch scorer: four stride-2 convolutions, then a 1x1 projection.

    Outputs one unbounded real score per receptive-field patch; a 256x256
    input yields a 16x16 score map, a 64x64 input a 4x4 map.
    """

    MIN_INPUT = 16

    def __init__(self, config: DiscriminatorConfig, rng):
        super().__init__()
        self.config = config
        base = config.base_channels
        widths = [base, base * 2, base * 4, base * 8]
        self.conv0 = Conv2d(config.in_channels, widths[0], 4, rng, stride=2, padding=1)
        self.conv1 = Conv2d(widths[0], widths[1], 4, rng, stride=2, padding=1)
        self.norm1 = InstanceNorm2d(widths[1])
        self.conv2 = Conv2d(widths[1], widths[2], 4, rng, stride=2, padding=1)
        self.norm2 = InstanceNorm2d(widths[2])
        self.conv3 = Conv2d(widths[2], widths[3], 4, rng, stride=2, padding=1)
        self.norm3 = InstanceNorm2d(widths[3])
        self.score = Conv2d(widths[3], 1, 1, rng)

    def __call__(self, img):
        x = ad.as_tensor(img)
        if x.data.ndim != 4 or x.data.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected B x {self.config.in_channels} x H x W input, "
                f"got shape {tuple(x.data.shape)}")
        if min(x.data.shape[2], x.data.shape[3]) < self.MIN_INPUT:
            raise ShapeError(
                f"input must be at least {self.MIN_INPUT} x {self.MIN_INPUT}, "
                f"got {x.data.shape[2]} x {x.data.shape[3]}")
        h = ad.leaky_relu(self.conv0(x))
        h = ad.leaky_relu(self.norm1(self.conv1(h)))
        h = ad.leaky_relu(self.norm2(self.conv2(h)))
        h = ad.leaky_relu(self.norm3(self.conv3(h)))
        return self.score(h)


def dehaze_image(gen: Generator, image: np.ndarray) -> np.ndarray:
    """Run one H x W x 3 image in [0, 1] through a generator.

    Spatial dims are edge-padded up to the next multiple of 4 and the output
    cropped back, so any input size is accepted and preserved.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != gen.config.in_channels:
        raise ShapeError(
            f"expected H x W x {gen.config.in_channels} image, got {image.shape}")
    h_dim, w_dim = image.shape[:2]
    pad_h = (-h_dim) % 4
    pad_w = (-w_dim) % 4
    if pad_h or pad_w:
        image = np.pad(image, ((0, pad_h), (0, pad_w), (0, 0)), mode="edge")
    batch = image.transpose(2, 0, 1)[None]
    out = gen(Tensor(batch)).data[0].transpose(1, 2, 0)
    return np.clip(out[:h_dim, :w_dim], 0.0, 1.0).astype(np.float32)


def state_dict_hash(state: dict) -> str:
    """Content hash over parameter names, shapes, dtypes, and raw bytes."""
    digest = hashlib.sha256()
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        digest.update(name.encode())
        digest.update(str(arr.shape).encode())
        digest.update(str(arr.dtype).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()


def _manifest_path(archive_path: Path) -> Path:
    return archive_path.with_suffix(".json")


def save_weights(module: Module, arch: dict, path) -> Path:
    """Write a weight archive: tensors as .npz plus a JSON manifest."""
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    state = module.state_dict()
    np.savez(path, **state)
    manifest = {
        "format_version": WEIGHT_FORMAT_VERSION,
        "arch": arch,
        "sha256": state_dict_hash(state),
    }
    with open(_manifest_path(path), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return path


def load_weights(path) -> tuple[dict, dict]:
    """Read a weight archive, returning (state dict, manifest).

    Verifies the manifest's content hash against the stored tensors.
    """
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    manifest_path = _manifest_path(path)
    if not path.exists():
        raise CheckpointError(f"weight archive not found: {path}")
    if not manifest_path.exists():
        raise CheckpointError(f"weight manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointIntegrityError(f"unreadable manifest {manifest_path}: {exc}")
    if manifest.get("format_version") != WEIGHT_FORMAT_VERSION:
        raise CheckpointIncompatibleError(
            f"unsupported weight format version {manifest.get('format_version')!r}")
    with np.load(path) as bundle:
        state = {name: bundle[name] for name in bundle.files}
    actual = state_dict_hash(state)
    expected = manifest.get("sha256")
    if actual != expected:
        raise CheckpointIntegrityError(
            f"weight archive {path} content hash {actual[:12]} does not match "
            f"manifest {str(expected)[:12]}")
    return state, manifest


def generator_arch(config: GeneratorConfig) -> dict:
    return {"kind": "generator", **asdict(config)}


def discriminator_arch(config: DiscriminatorConfig) -> dict:
    return {"kind": "discriminator", **asdict(config)}


def save_generator(gen: Generator, path) -> Path:
    return save_weights(gen, generator_arch(gen.config), path)


def load_generator(path) -> Generator:
    """Rebuild a generator from an archive, rejecting architecture mismatches."""
    state, manifest = load_weights(path)
    arch = dict(manifest.get("arch", {}))
    if arch.pop("kind", None) != "generator":
        raise CheckpointIncompatibleError(
            f"archive {path} does not hold generator weights")
    try:
        config = GeneratorConfig(**arch)
    except (TypeError, ParameterError) as exc:
        raise CheckpointIncompatibleError(
            f"archive {path} has an invalid architecture record: {exc}")
    gen = Generator(config, np.random.default_rng(0))
    try:
        gen.load_state_dict(state)
    except ShapeError as exc:
        raise CheckpointIncompatibleError(
            f"archive {path} does not fit its declared architecture: {exc}")
    return gen
