"""Training loop: config plumbing, optimizer, step semantics, checkpoints,
determinism, resume equivalence, and the ablation harness."""

import json
import math
import warnings
from dataclasses import replace

import numpy as np
import pytest

from dcmdehaze import autodiff as ad
from dcmdehaze.autodiff import Module, Tensor
from dcmdehaze.data import build_synthetic_dataset, load_unpaired, sample_batch
from dcmdehaze.errors import (CheckpointError, CheckpointIncompatibleError,
                              CheckpointIntegrityError, ConfigError,
                              DatasetError, TrainingAbortError)
from dcmdehaze.trainer import (DESK_PRESET, TABLE2_ROWS, Adam, TrainConfig,
                               checkpoint_load, checkpoint_save,
                               config_from_dict, config_to_dict,
                               evaluate_generator, init_state,
                               load_train_config, normalize_rows,
                               run_ablation, save_train_config, train,
                               train_step)

TINY = dict(crop=16, batch_size=2, base_channels=4, n_stages=1, rdb_growth=4,
            rdb_layers=2, disc_channels=4, checkpoint_interval=1000,
            contour_mode="matched")


def tiny_config(**overrides):
    merged = {**TINY, "max_steps": 4, **overrides}
    return TrainConfig(**merged)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("trainer_data") / "ds"
    return build_synthetic_dataset(root, n=12, size=32, seed=7)


def all_weights(state):
    return {f"{prefix}/{name}": value.copy()
            for prefix, net in state.networks()
            for name, value in net.state_dict().items()}


# ---------------------------------------------------------------- config

def test_config_defaults_and_desk_preset():
    config = TrainConfig()
    assert config.lr == 1e-4
    assert config.adam_beta1 == 0.9 and config.adam_beta2 == 0.999
    assert config.batch_size == 2 and config.crop == 256
    assert config.loss_weights.lambda_contour == 0.5
    assert DESK_PRESET.crop == 64 and DESK_PRESET.max_steps == 2000
    assert DESK_PRESET.contour_mode == "matched"


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(crop=30)  # not a multiple of 4
    with pytest.raises(ConfigError):
        TrainConfig(crop=12)  # below the discriminator minimum
    with pytest.raises(ConfigError):
        TrainConfig(adam_beta1=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(lambda_cyc=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(contour_mode="sharpen")
    with pytest.raises(ConfigError):
        TrainConfig(max_steps=-1)
    with pytest.raises(ConfigError):
        TrainConfig(disc_lr_scale=0.0)


def test_config_file_round_trip(tmp_path):
    config = tiny_config(lr=3e-4, use_ffm=False)
    path = save_train_config(config, tmp_path / "config.json")
    assert load_train_config(path) == config


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="momentum"):
        config_from_dict({"momentum": 0.9})


def test_config_rejects_bad_version():
    with pytest.raises(ConfigError, match="version"):
        config_from_dict({"version": 99, "lr": 1e-4})


def test_config_missing_file_and_bad_json(tmp_path):
    with pytest.raises(ConfigError):
        load_train_config(tmp_path / "none.json")
    (tmp_path / "bad.json").write_text("{oops")
    with pytest.raises(ConfigError):
        load_train_config(tmp_path / "bad.json")


def test_config_toggle_row_mapping():
    config = tiny_config().with_toggle_row((1, 0, 1, 0))
    assert config.use_ddscm and not config.use_dfre
    assert config.use_ffm and not config.use_bca
    assert config.toggles == {"ddscm": True, "dfre": False, "att": True,
                              "bca": False}


# ------------------------------------------------------------- optimizer

def test_adam_minimizes_quadratic():
    target = np.array([3.0, -2.0, 0.5], dtype=np.float32)
    p = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
    opt = Adam([p], lr=0.1, beta1=0.9, beta2=0.999)
    for _ in range(400):
        p.grad = None
        diff = p - Tensor(target)
        ad.mean_all(diff * diff).backward()
        opt.step()
    assert np.allclose(p.data, target, atol=1e-3)


def test_adam_zero_gradient_is_no_op_from_rest():
    p = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
    opt = Adam([p], lr=0.5, beta1=0.9, beta2=0.999)
    before = p.data.copy()
    p.grad = np.zeros(2, dtype=np.float32)
    opt.step()
    p.grad = None
    opt.step()
    assert np.array_equal(p.data, before)


# ------------------------------------------------------------ train_step

def test_init_state_is_deterministic():
    a, b = init_state(tiny_config()), init_state(tiny_config())
    wa, wb = all_weights(a), all_weights(b)
    assert sorted(wa) == sorted(wb)
    for name in wa:
        assert np.array_equal(wa[name], wb[name]), name


def test_zero_weighted_objective_gives_zero_generator_gradients(dataset):
    config = tiny_config(lambda_cyc=0.0, lambda_adv=0.0, lambda_contour=0.0)
    state = init_state(config)
    before = all_weights(state)
    batch = sample_batch(dataset, 2, 16, seed=0, step=0)
    train_step(state, batch, update_discriminators=False)
    for gen in (state.g_dehaze, state.g_rehaze):
        for name, p in gen.named_parameters():
            assert p.grad is not None and np.all(p.grad == 0.0), name
    after = all_weights(state)
    for name in before:
        assert np.array_equal(before[name], after[name]), name


class IdentityGenerator(Module):
    def __call__(self, img):
        return ad.as_tensor(img)


def test_identity_generators_give_zero_cycle_and_contour(dataset):
    config = tiny_config()
    state = init_state(config)
    state.g_dehaze = IdentityGenerator()
    state.g_rehaze = IdentityGenerator()
    state.opt_g = Adam([], lr=config.lr, beta1=0.9, beta2=0.999)
    batch = sample_batch(dataset, 2, 16, seed=1, step=0)
    breakdown = train_step(state, batch)
    assert breakdown.cyc == 0.0
    assert breakdown.contour == 0.0
    assert math.isfinite(breakdown.adv_g) and math.isfinite(breakdown.adv_d)


def test_step_updates_only_unfrozen_side(dataset):
    batch = sample_batch(dataset, 2, 16, seed=2, step=0)

    state = init_state(tiny_config())
    before = all_weights(state)
    train_step(state, batch, update_discriminators=False)
    after = all_weights(state)
    assert any(not np.array_equal(before[n], after[n])
               for n in before if n.startswith("g_"))
    for name in before:
        if name.startswith("d_"):
            assert np.array_equal(before[name], after[name]), name

    state = init_state(tiny_config())
    before = all_weights(state)
    train_step(state, batch, update_generators=False)
    after = all_weights(state)
    assert any(not np.array_equal(before[n], after[n])
               for n in before if n.startswith("d_"))
    for name in before:
        if name.startswith("g_"):
            assert np.array_equal(before[name], after[name]), name


def test_step_counter_and_bca_toggle(dataset):
    state = init_state(tiny_config(use_bca=False))
    batch = sample_batch(dataset, 2, 16, seed=3, step=0)
    breakdown = train_step(state, batch)
    assert state.step == 1
    assert breakdown.contour == 0.0
    assert breakdown.total == pytest.approx(
        breakdown.cyc + breakdown.adv_g, rel=1e-12)


def test_non_finite_weights_abort_with_component(dataset):
    state = init_state(tiny_config())
    state.g_dehaze.head.weight.data[:] = np.nan
    batch = sample_batch(dataset, 2, 16, seed=4, step=0)
    with np.errstate(all="ignore"):
        with pytest.raises(TrainingAbortError) as info:
            train_step(state, batch)
    assert info.value.component == "cyc"
    assert info.value.step == 0


# ------------------------------------------------------------ checkpoints

def trained_state(dataset, steps=2, **overrides):
    config = tiny_config(max_steps=steps, **overrides)
    state = init_state(config)
    for k in range(steps):
        train_step(state, sample_batch(dataset, 2, 16, seed=config.seed, step=k))
    return state


def test_checkpoint_round_trip_bitwise(dataset, tmp_path):
    state = trained_state(dataset)
    path = checkpoint_save(state, tmp_path / "ckpt.npz")
    loaded = checkpoint_load(path)
    assert loaded.step == state.step
    assert loaded.opt_g.t == state.opt_g.t
    assert loaded.ema_total == state.ema_total
    original, restored = all_weights(state), all_weights(loaded)
    for name in original:
        assert np.array_equal(original[name], restored[name]), name
    for i in range(len(state.opt_g.params)):
        assert np.array_equal(state.opt_g.m[i], loaded.opt_g.m[i])
        assert np.array_equal(state.opt_g.v[i], loaded.opt_g.v[i])
    batch = sample_batch(dataset, 2, 16, seed=9, step=0)
    out_a = state.g_dehaze(Tensor(batch.hazy)).data
    out_b = loaded.g_dehaze(Tensor(batch.hazy)).data
    assert np.array_equal(out_a, out_b)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint_load(tmp_path / "absent.npz")


def test_checkpoint_detects_truncation(dataset, tmp_path):
    state = trained_state(dataset)
    path = checkpoint_save(state, tmp_path / "ckpt.npz")
    path.write_bytes(path.read_bytes()[:64])
    with pytest.raises(CheckpointIntegrityError):
        checkpoint_load(path)


def test_checkpoint_detects_hash_mismatch(dataset, tmp_path):
    state = trained_state(dataset)
    path = checkpoint_save(state, tmp_path / "ckpt.npz")
    manifest_path = path.with_suffix(".json")
    manifest = json.loads(manifest_path.read_text())
    manifest["sha256"] = "0" * 64
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointIntegrityError):
        checkpoint_load(path)


def test_checkpoint_rejects_future_version(dataset, tmp_path):
    state = trained_state(dataset)
    path = checkpoint_save(state, tmp_path / "ckpt.npz")
    manifest_path = path.with_suffix(".json")
    manifest = json.loads(manifest_path.read_text())
    manifest["format_version"] = 99
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointIncompatibleError):
        checkpoint_load(path)


def test_checkpoint_names_mismatched_toggle(dataset, tmp_path):
    state = trained_state(dataset)
    path = checkpoint_save(state, tmp_path / "ckpt.npz")
    wanted = replace(state.config, use_dfre=not state.config.use_dfre)
    with pytest.raises(CheckpointIncompatibleError, match="use_dfre"):
        checkpoint_load(path, expected_config=wanted)


def test_checkpoint_names_mismatched_field(dataset, tmp_path):
    state = trained_state(dataset)
    path = checkpoint_save(state, tmp_path / "ckpt.npz")
    wanted = replace(state.config, lr=5e-4)
    with pytest.raises(CheckpointIncompatibleError, match="lr"):
        checkpoint_load(path, expected_config=wanted)


def test_checkpoint_allows_extended_max_steps(dataset, tmp_path):
    state = trained_state(dataset)
    path = checkpoint_save(state, tmp_path / "ckpt.npz")
    wanted = replace(state.config, max_steps=100)
    loaded = checkpoint_load(path, expected_config=wanted)
    assert loaded.step == state.step


# ------------------------------------------------------------ train loop

def test_train_zero_steps_writes_initial_checkpoint(dataset, tmp_path):
    config = tiny_config(max_steps=0)
    state = train(config, dataset, tmp_path / "run")
    assert state.step == 0
    assert (tmp_path / "run" / "checkpoint.npz").exists()
    assert (tmp_path / "run" / "config.json").exists()
    assert (tmp_path / "run" / "loss_log.jsonl").read_text() == ""


def test_train_log_records_and_weighted_total(dataset, tmp_path):
    config = tiny_config(max_steps=5)
    train(config, dataset, tmp_path / "run", deterministic=True)
    lines = (tmp_path / "run" / "loss_log.jsonl").read_text().splitlines()
    assert len(lines) == 5
    for i, line in enumerate(lines):
        record = json.loads(line)
        assert record["step"] == i + 1
        assert record["wall_time"] == 0.0
        expected = (config.lambda_cyc * record["cyc"]
                    + config.lambda_adv * record["adv_g"]
                    + config.lambda_contour * record["contour"])
        assert record["total"] == pytest.approx(expected, rel=1e-12)


def test_train_wall_time_recorded_outside_deterministic_mode(dataset, tmp_path):
    config = tiny_config(max_steps=1)
    train(config, dataset, tmp_path / "run", deterministic=False)
    record = json.loads(
        (tmp_path / "run" / "loss_log.jsonl").read_text().splitlines()[0])
    assert record["wall_time"] > 0.0


def test_train_deterministic_logs_are_bitwise_equal(dataset, tmp_path):
    config = tiny_config(max_steps=4)
    train(config, dataset, tmp_path / "a", deterministic=True)
    train(config, dataset, tmp_path / "b", deterministic=True)
    log_a = (tmp_path / "a" / "loss_log.jsonl").read_bytes()
    log_b = (tmp_path / "b" / "loss_log.jsonl").read_bytes()
    assert log_a == log_b


def test_train_resume_matches_uninterrupted(dataset, tmp_path):
    full = train(tiny_config(max_steps=8), dataset, tmp_path / "full",
                 deterministic=True)
    train(tiny_config(max_steps=4), dataset, tmp_path / "part1",
          deterministic=True)
    resumed = train(tiny_config(max_steps=8), dataset, tmp_path / "part2",
                    deterministic=True,
                    resume_from=tmp_path / "part1" / "checkpoint.npz")
    assert resumed.step == full.step == 8
    weights_full, weights_resumed = all_weights(full), all_weights(resumed)
    for name in weights_full:
        assert np.array_equal(weights_full[name], weights_resumed[name]), name
    for i in range(len(full.opt_g.params)):
        assert np.array_equal(full.opt_g.m[i], resumed.opt_g.m[i])
        assert np.array_equal(full.opt_g.v[i], resumed.opt_g.v[i])


def test_train_config_snapshots_differ_only_in_toggles(dataset, tmp_path):
    base = tiny_config(max_steps=1)
    train(base.with_toggle_row((0, 0, 0, 0)), dataset, tmp_path / "off")
    train(base.with_toggle_row((1, 1, 1, 1)), dataset, tmp_path / "on")
    doc_off = json.loads((tmp_path / "off" / "config.json").read_text())
    doc_on = json.loads((tmp_path / "on" / "config.json").read_text())
    differing = sorted(k for k in doc_off if doc_off[k] != doc_on[k])
    assert differing == ["use_bca", "use_ddscm", "use_dfre", "use_ffm"]


def test_train_abort_preserves_last_checkpoint(dataset, tmp_path):
    config = tiny_config(max_steps=50, lr=1e30)
    with np.errstate(all="ignore"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            with pytest.raises(TrainingAbortError):
                train(config, dataset, tmp_path / "run")
    restored = checkpoint_load(tmp_path / "run" / "checkpoint.npz")
    for _, net in restored.networks():
        for name, p in net.named_parameters():
            assert np.all(np.isfinite(p.data)), name


def test_smoke_training_reduces_smoothed_loss(tmp_path):
    manifest = build_synthetic_dataset(tmp_path / "ds", n=50, size=32, seed=21)
    config = tiny_config(max_steps=200, seed=1)
    state = init_state(config)
    smoothed = {}
    for k in range(200):
        train_step(state, sample_batch(manifest, 2, 16, seed=1, step=k))
        if state.step in (20, 200):
            smoothed[state.step] = state.ema_total
    assert smoothed[200] < smoothed[20]


# --------------------------------------------------------------- ablation

def test_toggle_grid_rows():
    assert len(TABLE2_ROWS) == 7
    assert TABLE2_ROWS[0] == (0, 0, 0, 0)
    assert TABLE2_ROWS[-1] == (1, 1, 1, 1)
    assert TABLE2_ROWS == ((0, 0, 0, 0), (1, 0, 0, 0), (0, 1, 0, 0),
                           (0, 1, 0, 1), (0, 1, 1, 0), (1, 0, 1, 1),
                           (1, 1, 1, 1))
    assert len(set(TABLE2_ROWS)) == 7


def test_normalize_rows_parses_and_dedupes():
    assert normalize_rows(["1010"]) == [(True, False, True, False)]
    with pytest.warns(UserWarning, match="duplicate"):
        rows = normalize_rows([(1, 1, 1, 1), "1111"])
    assert rows == [(True, True, True, True)]
    with pytest.raises(ConfigError):
        normalize_rows(["11"])
    with pytest.raises(ConfigError):
        normalize_rows([])


def test_evaluate_generator_reports_means(dataset):
    state = init_state(tiny_config())
    report = evaluate_generator(state.g_dehaze, dataset)
    assert set(report) == {"psnr_db", "ssim", "ciede2000"}
    for value in report.values():
        assert math.isfinite(value)
    assert -1.0 <= report["ssim"] <= 1.0


def test_evaluate_generator_needs_pairs(dataset, tmp_path):
    hazy_dir = dataset.root / "hazy"
    unpaired = load_unpaired(hazy_dir, hazy_dir)
    state = init_state(tiny_config())
    with pytest.raises(DatasetError):
        evaluate_generator(state.g_dehaze, unpaired)


def test_run_ablation_emits_table(dataset, tmp_path):
    results = run_ablation(tiny_config(max_steps=2), dataset, dataset,
                           tmp_path / "ablate",
                           rows=[(0, 0, 0, 0), (1, 1, 1, 1)])
    assert len(results) == 2
    for row, toggles in zip(results, [(0, 0, 0, 0), (1, 1, 1, 1)]):
        assert (row["ddscm"], row["dfre"], row["att"], row["bca"]) \
            == tuple(bool(v) for v in toggles)
        assert row["status"] == "ok"
        assert math.isfinite(row["psnr_db"])
    table = json.loads((tmp_path / "ablate" / "ablation.json").read_text())
    assert len(table["rows"]) == 2
    csv_lines = (tmp_path / "ablate" / "ablation.csv").read_text().splitlines()
    assert csv_lines[0] == "ddscm,dfre,att,bca,psnr_db,ssim,ciede2000,status"
    assert len(csv_lines) == 3


def test_run_ablation_continues_after_failed_row(dataset, tmp_path):
    hazy_dir = dataset.root / "hazy"
    unpaired = load_unpaired(hazy_dir, hazy_dir)  # evaluation must fail
    results = run_ablation(tiny_config(max_steps=1), dataset, unpaired,
                           tmp_path / "ablate",
                           rows=[(0, 0, 0, 0), (1, 1, 1, 1)])
    assert [r["status"] for r in results] == ["failed", "failed"]
    assert all(r["psnr_db"] is None for r in results)
    assert all(r["error"] for r in results)
    assert (tmp_path / "ablate" / "ablation.csv").exists()
