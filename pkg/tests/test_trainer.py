import json
import math
import struct

import numpy as np
import pytest

from cloudmask.datapipe import extract_train_patches, generate_dataset, split_train_val
from cloudmask.ndtensor import NonFiniteError, Tensor, no_grad
from cloudmask.trainer import (
    CHECKPOINT_FILE,
    METRICS_FILE,
    SUMMARY_FILE,
    AdamState,
    CheckpointCorruptError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigMismatchError,
    EarlyStopState,
    TrainConfig,
    adam_step,
    early_stop_update,
    load_checkpoint,
    read_metrics,
    save_checkpoint,
    train,
)
from cloudmask.unet import ModelParams, UNetConfig, build_unet, unet_forward
from oracles import adam_scalar

TINY = UNetConfig(depth=1, base_channels=2, patch_size=16)


def _scalar_params(value):
    """A ModelParams stand-in with one float64 scalar parameter."""

    class One:
        config = None

        def __init__(self):
            self.t = Tensor(np.array([value], dtype=np.float64))

        def names(self):
            return ["theta"]

        def __iter__(self):
            return iter([("theta", self.t)])

    return One()


@pytest.fixture(scope="module")
def tiny_split():
    scenes = generate_dataset(4, 32, 32, seed=0)
    return split_train_val(extract_train_patches(scenes, 16), 0.8, seed=0)


# --- Adam -------------------------------------------------------------------------

def test_first_adam_step_moves_by_lr():
    for g in (0.003, -5.0, 1e4):
        p = _scalar_params(1.0)
        state = AdamState([np.zeros(1)], [np.zeros(1)])
        adam_step(p, [np.array([g])], state, TrainConfig(learning_rate=0.01))
        assert p.t.data[0] == pytest.approx(1.0 - 0.01 * math.copysign(1, g), abs=1e-7)
        assert state.t == 1


def test_zero_gradient_leaves_params():
    p = _scalar_params(2.5)
    state = AdamState([np.zeros(1)], [np.zeros(1)])
    adam_step(p, [np.zeros(1)], state, TrainConfig())
    assert p.t.data[0] == 2.5


def test_adam_matches_scalar_oracle_on_quadratic():
    p = _scalar_params(1.0)
    state = AdamState([np.zeros(1)], [np.zeros(1)])
    cfg = TrainConfig(learning_rate=0.1)
    for _ in range(100):
        adam_step(p, [2.0 * p.t.data], state, cfg)
    expected = adam_scalar(lambda th: 2.0 * th, 1.0, 0.1, 100)
    assert abs(p.t.data[0]) < 0.1
    assert p.t.data[0] == pytest.approx(expected, abs=1e-12)


def test_adam_rejects_non_finite_gradient_by_name():
    params = build_unet(TINY, 0)
    state = AdamState.zeros_like(params)
    grads = [np.zeros_like(a) for a in params.arrays()]
    grads[3][0] = np.nan
    with pytest.raises(NonFiniteError, match=params.names()[3]):
        adam_step(params, grads, state, TrainConfig())
    assert state.t == 0


# --- early stopping -----------------------------------------------------------------

def _run_stopper(seq, patience):
    state = EarlyStopState()
    for epoch, v in enumerate(seq, start=1):
        if early_stop_update(state, v, epoch, patience):
            return epoch, state.best_epoch
    return None, state.best_epoch


def test_early_stop_small_sequence():
    assert _run_stopper([3, 2, 1, 1, 1], 2) == (5, 3)


def test_early_stop_best_122_stops_147():
    seq = [1.0 - 0.001 * e for e in range(1, 123)] + [0.9] * 100
    assert _run_stopper(seq, 25) == (147, 122)


@pytest.mark.parametrize("best", [1, 10, 57, 175])
def test_stop_is_best_plus_patience(best):
    seq = [10.0 - e for e in range(best)] + [20.0] * 200
    stop, got_best = _run_stopper(seq, 25)
    assert got_best == best and stop == best + 25


def test_equal_metric_is_not_improvement():
    state = EarlyStopState()
    early_stop_update(state, 1.0, 1, 5)
    early_stop_update(state, 1.0, 2, 5)
    assert state.best_epoch == 1 and state.epochs_since_improvement == 1


def test_nan_metric_rejected():
    with pytest.raises(NonFiniteError):
        early_stop_update(EarlyStopState(), float("nan"), 1, 3)


def test_patience_must_be_below_max_epochs():
    with pytest.raises(ValueError, match="patience"):
        TrainConfig(patience=10, max_epochs=10).validate()


# --- checkpoints ----------------------------------------------------------------------

def _with_adam(params):
    state = AdamState.zeros_like(params)
    rng = np.random.default_rng(0)
    state.m = [rng.normal(size=a.shape).astype(np.float32) for a in params.arrays()]
    state.v = [rng.random(a.shape).astype(np.float32) for a in params.arrays()]
    state.t = 42
    return state


def test_checkpoint_round_trip(tmp_path):
    params = build_unet(TINY, 3)
    state = _with_adam(params)
    path = save_checkpoint(params, state, tmp_path / "a.ckpt")
    loaded, adam = load_checkpoint(path, expected_config=TINY)
    assert loaded.to_bytes() == params.to_bytes()
    assert adam.t == 42
    for a, b in zip(adam.m + adam.v, state.m + state.v):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_without_adam(tmp_path):
    params = build_unet(TINY, 3)
    _, adam = load_checkpoint(save_checkpoint(params, None, tmp_path / "a.ckpt"))
    assert adam is None


def test_checkpoint_predictions_bit_exact(tmp_path):
    params = build_unet(TINY, 5)
    x = np.random.default_rng(0).normal(size=(3, 9, 16, 16)).astype(np.float32)
    with no_grad():
        before = unet_forward(params, x).data
        loaded, _ = load_checkpoint(save_checkpoint(params, None, tmp_path / "a.ckpt"))
        after = unet_forward(loaded, x).data
    assert before.tobytes() == after.tobytes()


def _saved(tmp_path):
    return save_checkpoint(build_unet(TINY, 0), None, tmp_path / "c.ckpt")


def _mutate(path, fn):
    raw = bytearray(path.read_bytes())
    path.write_bytes(bytes(fn(raw)))
    return path


def test_corrupt_magic(tmp_path):
    path = _mutate(_saved(tmp_path), lambda b: b"NOPE" + b[4:])
    with pytest.raises(CheckpointMagicError):
        load_checkpoint(path)


def test_corrupt_version(tmp_path):
    path = _mutate(_saved(tmp_path), lambda b: b[:4] + struct.pack("<H", 7) + b[6:])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_truncated(tmp_path):
    path = _mutate(_saved(tmp_path), lambda b: b[:-10])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_empty_file(tmp_path):
    path = tmp_path / "empty.ckpt"
    path.write_bytes(b"")
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_nan_payload(tmp_path):
    path = _saved(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[-5:-1] = struct.pack("<f", float("nan"))  # out.bias value, just before the adam flag
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointCorruptError, match="non-finite"):
        load_checkpoint(path)


def test_shape_field_corrupted(tmp_path):
    path = _saved(tmp_path)
    raw = bytearray(path.read_bytes())
    name = b"down0.conv_a.weight"
    dims_at = raw.index(name) + len(name) + 1
    raw[dims_at:dims_at + 4] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointCorruptError, match="shape"):
        load_checkpoint(path)


def test_trailing_bytes(tmp_path):
    path = _mutate(_saved(tmp_path), lambda b: b + b"\x00\x00")
    with pytest.raises(CheckpointCorruptError, match="trailing"):
        load_checkpoint(path)


def test_config_mismatch(tmp_path):
    path = _saved(tmp_path)
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, expected_config=UNetConfig(depth=1, base_channels=4, patch_size=16))


# --- training loop ----------------------------------------------------------------------

def test_training_is_deterministic(tmp_path, tiny_split):
    cfg = TrainConfig(max_epochs=3, patience=2, batch_size=4, seed=1)
    train(TINY, cfg, tiny_split, tmp_path / "a")
    train(TINY, cfg, tiny_split, tmp_path / "b")

    def masked(path):
        return [line.rsplit(",", 1)[0] for line in path.read_text().splitlines()]

    assert masked(tmp_path / "a" / METRICS_FILE) == masked(tmp_path / "b" / METRICS_FILE)
    assert (tmp_path / "a" / CHECKPOINT_FILE).read_bytes() == (tmp_path / "b" / CHECKPOINT_FILE).read_bytes()


def test_training_outputs_and_best_checkpoint(tmp_path, tiny_split):
    cfg = TrainConfig(max_epochs=4, patience=3, batch_size=4, seed=0, learning_rate=1e-2)
    result = train(TINY, cfg, tiny_split, tmp_path / "run")
    records = read_metrics(result.metrics_log)
    assert [r.epoch for r in records] == list(range(1, result.epochs_run + 1))
    best = min(records, key=lambda r: r.val_loss)
    assert result.best_epoch == best.epoch
    assert result.val_acc == best.val_acc
    _, adam = load_checkpoint(result.checkpoint, expected_config=TINY)
    steps_per_epoch = math.ceil(len(tiny_split.train) / cfg.batch_size)
    assert adam.t == result.best_epoch * steps_per_epoch
    summary = json.loads((tmp_path / "run" / SUMMARY_FILE).read_text())
    assert summary["best_epoch"] == result.best_epoch


def test_training_reduces_loss(tmp_path, tiny_split):
    cfg = TrainConfig(max_epochs=6, patience=5, batch_size=4, seed=0, learning_rate=1e-2)
    result = train(TINY, cfg, tiny_split, tmp_path / "run")
    records = read_metrics(result.metrics_log)
    assert min(r.train_loss for r in records) < records[0].train_loss


def test_refuses_non_empty_dir(tmp_path, tiny_split):
    (tmp_path / "run").mkdir()
    (tmp_path / "run" / "keep.txt").write_text("x")
    with pytest.raises(FileExistsError):
        train(TINY, TrainConfig(max_epochs=2, patience=1), tiny_split, tmp_path / "run")
    assert (tmp_path / "run" / "keep.txt").read_text() == "x"


def test_different_seeds_differ(tmp_path, tiny_split):
    a = train(TINY, TrainConfig(max_epochs=2, patience=1, batch_size=4, seed=0), tiny_split, tmp_path / "a")
    b = train(TINY, TrainConfig(max_epochs=2, patience=1, batch_size=4, seed=1), tiny_split, tmp_path / "b")
    assert open(a.checkpoint, "rb").read() != open(b.checkpoint, "rb").read()


def test_model_params_type_after_load(tmp_path):
    loaded, _ = load_checkpoint(_saved(tmp_path))
    assert isinstance(loaded, ModelParams) and loaded.config == TINY


def test_desk_scale_golden(tmp_path):
    # 40 scenes 128x128, patch 32, depth 2, base 8, seed 0; values recorded from
    # the first run of this exact configuration
    from cloudmask.datapipe import crop_to_grid, split_scenes

    train_scenes, _ = split_scenes(generate_dataset(40, 128, 128, seed=0))
    patches = extract_train_patches([crop_to_grid(s, 32) for s in train_scenes], 32)
    split = split_train_val(patches, 0.8, seed=0)
    assert (len(split.train), len(split.val)) == (461, 115)
    cfg = UNetConfig(depth=2, base_channels=8, patch_size=32)
    result = train(cfg, TrainConfig(max_epochs=2, patience=1, seed=0), split, tmp_path / "run")
    records = read_metrics(result.metrics_log)
    assert records[0].train_loss == pytest.approx(0.38082461279944546, rel=1e-5)
    assert records[1].train_acc == pytest.approx(0.9614692075650759, abs=1e-4)
    assert records[1].train_acc > 0.85
