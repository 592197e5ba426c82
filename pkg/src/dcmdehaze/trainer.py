"""Dual-branch unpaired training loop with checkpointing and ablation runs.

Two generators (dehaze and rehaze directions) and two patch discriminators
(one per domain) train alternately: each step updates the generators on the
weighted cycle + adversarial + contour objective, then updates both
discriminators on their least-squares real/fake losses against detached
generator outputs.

Everything that influences a run is captured in one flat, versioned
TrainConfig; in deterministic mode, (config, manifest) reproduce loss logs
bitwise. Checkpoints hold network weights, optimizer moments, and counters in
one hashed archive and are written atomically (temp file, then rename).

The contour term has two modes. ``literal`` penalizes the mean edge magnitude
of the dehazed output. ``matched`` compares edge magnitudes across both cycle
directions: the dehazed output against its source hazy frame, and the cycled
clear reconstruction against the original clear frame.

Ablation toggle columns: ddscm = gated depthwise modulation blocks,
dfre = bottleneck feature refinement, att = attention-based edge fusion,
bca = the contour loss term.
"""

from __future__ import annotations

import csv
import json
import math
import os
import time
import warnings
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .data import DatasetManifest, load_entry_clean, load_entry_hazy, sample_batch
from .errors import (CheckpointError, CheckpointIncompatibleError,
                     CheckpointIntegrityError, ConfigError, DatasetError,
                     NumericError, TrainingAbortError, ValidationError)
from .losses import (CONTOUR_MODES, LossBreakdown, LossWeights,
                     adv_loss_discriminator, adv_loss_generator, contour_loss,
                     cycle_loss, total_loss)
from .metrics import ciede2000, psnr, ssim
from .networks import (Discriminator, DiscriminatorConfig, Generator,
                       GeneratorConfig, dehaze_image, state_dict_hash)

CONFIG_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_KIND = "train_state"
TOGGLE_FIELDS = ("use_ddscm", "use_dfre", "use_ffm", "use_bca")
TOGGLE_COLUMNS = ("ddscm", "dfre", "att", "bca")
EMA_DECAY = 0.95

# The seven toggle rows of the ablation grid, as (ddscm, dfre, att, bca).
TABLE2_ROWS = (
    (0, 0, 0, 0),
    (1, 0, 0, 0),
    (0, 1, 0, 0),
    (0, 1, 0, 1),
    (0, 1, 1, 0),
    (1, 0, 1, 1),
    (1, 1, 1, 1),
)


@dataclass(frozen=True)
class TrainConfig:
    """Flat, fully serializable description of one training run."""

    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 2
    crop: int = 256
    max_steps: int = 2000
    seed: int = 0
    lambda_cyc: float = 1.0
    lambda_adv: float = 1.0
    lambda_contour: float = 0.5
    use_ddscm: bool = True
    use_dfre: bool = True
    use_ffm: bool = True
    use_bca: bool = True
    contour_mode: str = "literal"
    checkpoint_interval: int = 500
    log_interval: int = 1
    base_channels: int = 64
    n_stages: int = 6
    rdb_growth: int = 32
    rdb_layers: int = 4
    disc_channels: int = 64
    disc_lr_scale: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise ConfigError(f"lr must be positive and finite, got {self.lr}")
        if not (math.isfinite(self.disc_lr_scale) and self.disc_lr_scale > 0):
            raise ConfigError(
                f"disc_lr_scale must be positive and finite, got {self.disc_lr_scale}")
        for name in ("adam_beta1", "adam_beta2"):
            value = getattr(self, name)
            if not (0.0 <= value < 1.0):
                raise ConfigError(f"{name} must lie in [0, 1), got {value}")
        for name in ("batch_size", "checkpoint_interval", "log_interval",
                     "base_channels", "n_stages", "rdb_growth", "rdb_layers",
                     "disc_channels"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.rdb_layers < 2:
            raise ConfigError(f"rdb_layers must be >= 2, got {self.rdb_layers}")
        if not isinstance(self.max_steps, int) or self.max_steps < 0:
            raise ConfigError(f"max_steps must be a nonnegative integer, got {self.max_steps!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")
        if self.crop < 16 or self.crop % 4 != 0:
            raise ConfigError(
                f"crop must be a multiple of 4 and at least 16, got {self.crop}")
        for name in ("lambda_cyc", "lambda_adv", "lambda_contour"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {value}")
        if self.contour_mode not in CONTOUR_MODES:
            raise ConfigError(
                f"contour_mode must be one of {CONTOUR_MODES}, got {self.contour_mode!r}")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_cyc=self.lambda_cyc, lambda_adv=self.lambda_adv,
                           lambda_contour=self.lambda_contour)

    @property
    def toggles(self) -> dict:
        return {column: bool(getattr(self, fld))
                for column, fld in zip(TOGGLE_COLUMNS, TOGGLE_FIELDS)}

    @property
    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            base_channels=self.base_channels, n_stages=self.n_stages,
            rdb_growth=self.rdb_growth, rdb_layers=self.rdb_layers,
            use_ddscm=self.use_ddscm, use_dfre=self.use_dfre, use_ffm=self.use_ffm)

    @property
    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(base_channels=self.disc_channels)

    def with_toggle_row(self, row) -> "TrainConfig":
        ddscm, dfre, att, bca = (bool(v) for v in row)
        return replace(self, use_ddscm=ddscm, use_dfre=dfre, use_ffm=att, use_bca=bca)


# Small networks and short crops so one full run takes minutes on a CPU.
DESK_PRESET = TrainConfig(
    crop=64, batch_size=2, max_steps=2000, contour_mode="matched",
    base_channels=16, n_stages=3, rdb_growth=8, rdb_layers=3, disc_channels=16,
    checkpoint_interval=500, log_interval=1)


def config_to_dict(config: TrainConfig) -> dict:
    return {"version": CONFIG_VERSION, **asdict(config)}


def config_from_dict(document: dict) -> TrainConfig:
    if not isinstance(document, dict):
        raise ConfigError(f"config document must be a mapping, got {type(document).__name__}")
    data = dict(document)
    version = data.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {version!r}")
    known = set(TrainConfig.__dataclass_fields__)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config key '{unknown[0]}'")
    return TrainConfig(**data)


def save_train_config(config: TrainConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(config_to_dict(config), fh, indent=2)
        fh.write("\n")
    return path


def load_train_config(path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}")
    return config_from_dict(document)


class Adam:
    """Adam over a fixed parameter list; moments serialize for checkpoints."""

    def __init__(self, params, lr: float, beta1: float, beta2: float,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            grad = p.grad if p.grad is not None else 0.0
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (grad * grad)
            m_hat = self.m[i] / bias1
            v_hat = self.v[i] / bias2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainState:
    """Everything needed to continue a run: nets, moments, counters."""

    config: TrainConfig
    step: int
    g_dehaze: Generator
    g_rehaze: Generator
    d_clear: Discriminator
    d_hazy: Discriminator
    opt_g: Adam
    opt_d: Adam
    ema_total: float | None = None

    def networks(self):
        return (("g_dehaze", self.g_dehaze), ("g_rehaze", self.g_rehaze),
                ("d_clear", self.d_clear), ("d_hazy", self.d_hazy))


def init_state(config: TrainConfig) -> TrainState:
    gcfg = config.generator_config
    dcfg = config.discriminator_config
    g_dehaze = Generator(gcfg, np.random.default_rng([config.seed, 0]))
    g_rehaze = Generator(gcfg, np.random.default_rng([config.seed, 1]))
    d_clear = Discriminator(dcfg, np.random.default_rng([config.seed, 2]))
    d_hazy = Discriminator(dcfg, np.random.default_rng([config.seed, 3]))
    opt_g = Adam(g_dehaze.parameters() + g_rehaze.parameters(),
                 config.lr, config.adam_beta1, config.adam_beta2)
    opt_d = Adam(d_clear.parameters() + d_hazy.parameters(),
                 config.lr * config.disc_lr_scale,
                 config.adam_beta1, config.adam_beta2)
    return TrainState(config=config, step=0, g_dehaze=g_dehaze, g_rehaze=g_rehaze,
                      d_clear=d_clear, d_hazy=d_hazy, opt_g=opt_g, opt_d=opt_d)


def train_step(state: TrainState, batch, update_generators: bool = True,
               update_discriminators: bool = True) -> LossBreakdown:
    """One alternating update: generators first, then both discriminators."""
    config = state.config
    weights = config.loss_weights

    def guard(component, compute):
        # A diverged network produces non-finite activations; the loss
        # functions reject those as validation/numeric errors, which here
        # means the run must abort with the offending component named.
        try:
            return compute()
        except (ValidationError, NumericError):
            raise TrainingAbortError(component, state.step)

    hazy_real = Tensor(batch.hazy)
    clear_real = Tensor(batch.clean)

    dehazed = state.g_dehaze(hazy_real)
    hazy_cycled = state.g_rehaze(dehazed)
    rehazed = state.g_rehaze(clear_real)
    clear_cycled = state.g_dehaze(rehazed)

    cyc = guard("cyc", lambda: cycle_loss(clear_real, clear_cycled,
                                          hazy_real, hazy_cycled))
    adv_g = guard("adv_g", lambda: adv_loss_generator(state.d_clear(dehazed))
                  + adv_loss_generator(state.d_hazy(rehazed)))
    if config.use_bca:
        if config.contour_mode == "matched":
            contour = guard("contour", lambda: contour_loss(dehazed, "matched", hazy_real)
                            + contour_loss(clear_cycled, "matched", clear_real))
        else:
            contour = guard("contour", lambda: contour_loss(dehazed, "literal"))
        total = total_loss(cyc, adv_g, contour, weights)
        contour_value = float(contour.data)
    else:
        total = cyc * weights.lambda_cyc + adv_g * weights.lambda_adv
        contour_value = 0.0

    if update_generators:
        for _, net in state.networks():
            net.zero_grad()
        total.backward()
        state.opt_g.step()

    fake_clear = Tensor(dehazed.data.copy())
    fake_hazy = Tensor(rehazed.data.copy())
    adv_d = guard("adv_d", lambda: adv_loss_discriminator(
        state.d_clear(Tensor(batch.clean)), state.d_clear(fake_clear))
        + adv_loss_discriminator(state.d_hazy(Tensor(batch.hazy)),
                                 state.d_hazy(fake_hazy)))
    if update_discriminators:
        state.d_clear.zero_grad()
        state.d_hazy.zero_grad()
        adv_d.backward()
        state.opt_d.step()

    breakdown = LossBreakdown.weighted(
        float(cyc.data), float(adv_g.data), float(adv_d.data), contour_value,
        weights)
    for name, value in breakdown.as_dict().items():
        if not math.isfinite(value):
            raise TrainingAbortError(name, state.step)

    state.step += 1
    if state.ema_total is None:
        state.ema_total = breakdown.total
    else:
        state.ema_total = EMA_DECAY * state.ema_total \
            + (1.0 - EMA_DECAY) * breakdown.total
    return breakdown


# --------------------------------------------------------------------------
# checkpoints


def _state_arrays(state: TrainState) -> dict:
    arrays = {}
    for prefix, net in state.networks():
        for name, value in net.state_dict().items():
            arrays[f"net/{prefix}/{name}"] = value
    for tag, opt in (("g", state.opt_g), ("d", state.opt_d)):
        for i, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"opt/{tag}/m/{i:04d}"] = m
            arrays[f"opt/{tag}/v/{i:04d}"] = v
    return arrays


def checkpoint_save(state: TrainState, path) -> Path:
    """Atomically write the full training state next to a JSON manifest."""
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = _state_arrays(state)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "kind": CHECKPOINT_KIND,
        "config": config_to_dict(state.config),
        "step": state.step,
        "opt_g_t": state.opt_g.t,
        "opt_d_t": state.opt_d.t,
        "ema_total": state.ema_total,
        "sha256": state_dict_hash(arrays),
    }
    tmp_archive = path.parent / (path.name + ".tmp")
    with open(tmp_archive, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp_archive, path)
    manifest_path = path.with_suffix(".json")
    tmp_manifest = manifest_path.parent / (manifest_path.name + ".tmp")
    with open(tmp_manifest, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    os.replace(tmp_manifest, manifest_path)
    return path


def _mismatched_fields(expected: TrainConfig, found: TrainConfig) -> list:
    # max_steps may grow across resumes; everything else must match exactly.
    return [name for name in TrainConfig.__dataclass_fields__
            if name != "max_steps"
            and getattr(expected, name) != getattr(found, name)]


def checkpoint_load(path, expected_config: TrainConfig | None = None) -> TrainState:
    """Rebuild a TrainState from disk, verifying hash, version, and config."""
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    manifest_path = path.with_suffix(".json")
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    if not manifest_path.exists():
        raise CheckpointError(f"checkpoint manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointIntegrityError(f"unreadable checkpoint manifest: {exc}")
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointIncompatibleError(
            f"unsupported checkpoint format version {manifest.get('format_version')!r}")
    if manifest.get("kind") != CHECKPOINT_KIND:
        raise CheckpointIncompatibleError(
            f"archive {path} is not a training checkpoint")
    try:
        config = config_from_dict(manifest["config"])
    except (KeyError, ConfigError) as exc:
        raise CheckpointIncompatibleError(
            f"checkpoint {path} has an invalid config record: {exc}")

    if expected_config is not None:
        mismatched = _mismatched_fields(expected_config, config)
        if mismatched:
            toggle_diffs = [name for name in TOGGLE_FIELDS if name in mismatched]
            if toggle_diffs:
                raise CheckpointIncompatibleError(
                    f"checkpoint toggles differ from requested config: "
                    f"{', '.join(toggle_diffs)}")
            raise CheckpointIncompatibleError(
                f"checkpoint config differs from requested config in: "
                f"{', '.join(mismatched)}")

    try:
        with np.load(path, allow_pickle=False) as bundle:
            arrays = {name: bundle[name] for name in bundle.files}
    except Exception as exc:
        raise CheckpointIntegrityError(f"unreadable checkpoint archive {path}: {exc}")
    actual = state_dict_hash(arrays)
    if actual != manifest.get("sha256"):
        raise CheckpointIntegrityError(
            f"checkpoint {path} content hash {actual[:12]} does not match "
            f"manifest {str(manifest.get('sha256'))[:12]}")

    state = init_state(config)
    try:
        for prefix, net in state.networks():
            wanted = {name: arrays[f"net/{prefix}/{name}"]
                      for name in net.state_dict()}
            net.load_state_dict(wanted)
        for tag, opt in (("g", state.opt_g), ("d", state.opt_d)):
            for i in range(len(opt.params)):
                m = arrays[f"opt/{tag}/m/{i:04d}"]
                v = arrays[f"opt/{tag}/v/{i:04d}"]
                if m.shape != opt.params[i].data.shape:
                    raise KeyError(f"opt/{tag}/m/{i:04d}")
                opt.m[i] = m.astype(opt.params[i].data.dtype, copy=True)
                opt.v[i] = v.astype(opt.params[i].data.dtype, copy=True)
    except KeyError as exc:
        raise CheckpointIncompatibleError(
            f"checkpoint {path} does not fit its declared config: missing {exc}")
    state.step = int(manifest["step"])
    state.opt_g.t = int(manifest["opt_g_t"])
    state.opt_d.t = int(manifest["opt_d_t"])
    ema = manifest.get("ema_total")
    state.ema_total = None if ema is None else float(ema)
    return state


# --------------------------------------------------------------------------
# training loop


def train(config: TrainConfig, manifest: DatasetManifest, out_dir,
          deterministic: bool = False, resume_from=None) -> TrainState:
    """Run the loop to config.max_steps, logging and checkpointing on the way.

    Writes ``config.json`` (resolved config snapshot), ``loss_log.jsonl``
    (one record per logged step), and ``checkpoint.npz`` + ``.json`` in
    out_dir. With resume_from, continues an earlier run whose config must
    match. In deterministic mode wall times are logged as 0.0 so reruns are
    byte-identical.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_train_config(config, out_dir / "config.json")

    if resume_from is not None:
        state = checkpoint_load(resume_from, expected_config=config)
    else:
        state = init_state(config)

    checkpoint_path = out_dir / "checkpoint.npz"
    log_path = out_dir / "loss_log.jsonl"
    append_log = resume_from is not None and log_path.exists()
    checkpoint_save(state, checkpoint_path)

    with open(log_path, "a" if append_log else "w") as log:
        while state.step < config.max_steps:
            batch = sample_batch(manifest, config.batch_size, config.crop,
                                 config.seed, state.step)
            started = time.perf_counter()
            breakdown = train_step(state, batch)
            wall = 0.0 if deterministic else time.perf_counter() - started
            if state.step % config.log_interval == 0 \
                    or state.step == config.max_steps:
                record = {"step": state.step, **breakdown.as_dict(),
                          "wall_time": wall}
                log.write(json.dumps(record) + "\n")
                log.flush()
            if state.step % config.checkpoint_interval == 0:
                checkpoint_save(state, checkpoint_path)
        checkpoint_save(state, checkpoint_path)
    return state


# --------------------------------------------------------------------------
# evaluation and ablation


def evaluate_generator(gen: Generator, manifest: DatasetManifest) -> dict:
    """Mean PSNR/SSIM/CIEDE2000 of dehazed outputs against clean references.

    Requires entries with both hazy and clean images (a synthetic test split).
    """
    rows = []
    for entry in manifest.entries:
        if entry.hazy is None or entry.clean is None:
            continue
        hazy = load_entry_hazy(manifest, entry)
        clean = load_entry_clean(manifest, entry)
        output = dehaze_image(gen, hazy)
        rows.append((psnr(output, clean), ssim(output, clean),
                     ciede2000(output, clean)))
    if not rows:
        raise DatasetError("evaluation manifest has no hazy+clean entries")
    columns = list(zip(*rows))
    return {"psnr_db": float(np.mean(columns[0])),
            "ssim": float(np.mean(columns[1])),
            "ciede2000": float(np.mean(columns[2]))}


def normalize_rows(rows) -> list:
    """Validate toggle rows and drop duplicates (warning), preserving order."""
    seen = []
    for row in rows:
        row = tuple(bool(int(v)) for v in row)
        if len(row) != 4:
            raise ConfigError(f"toggle row must have 4 entries, got {row}")
        if row in seen:
            warnings.warn(f"duplicate toggle row {row} ignored")
            continue
        seen.append(row)
    if not seen:
        raise ConfigError("no toggle rows requested")
    return seen


def _write_ablation_table(results: list, out_dir: Path) -> None:
    json_path = out_dir / "ablation.json"
    with open(json_path, "w") as fh:
        json.dump({"rows": results}, fh, indent=2)
        fh.write("\n")
    csv_path = out_dir / "ablation.csv"
    columns = list(TOGGLE_COLUMNS) + ["psnr_db", "ssim", "ciede2000", "status"]
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in results:
            writer.writerow([int(row[c]) for c in TOGGLE_COLUMNS]
                            + ["" if row[c] is None else repr(row[c])
                               for c in ("psnr_db", "ssim", "ciede2000")]
                            + [row["status"]])


def run_ablation(base_config: TrainConfig, train_manifest: DatasetManifest,
                 test_manifest: DatasetManifest, out_dir,
                 rows=TABLE2_ROWS, deterministic: bool = True) -> list:
    """Train and evaluate one run per toggle row; emit a combined table.

    A failing row is recorded with status "failed" and its error message;
    remaining rows still run. Results are written to ablation.csv and
    ablation.json under out_dir and returned as a list of dicts.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for row in normalize_rows(rows):
        config = base_config.with_toggle_row(row)
        tag = "".join("1" if v else "0" for v in row)
        record = dict(zip(TOGGLE_COLUMNS, row))
        try:
            state = train(config, train_manifest, out_dir / f"row_{tag}",
                          deterministic=deterministic)
            record.update(evaluate_generator(state.g_dehaze, test_manifest))
            record.update(status="ok", error="")
        except Exception as exc:
            record.update(psnr_db=None, ssim=None, ciede2000=None,
                          status="failed", error=str(exc))
        results.append(record)
    _write_ablation_table(results, out_dir)
    return results
