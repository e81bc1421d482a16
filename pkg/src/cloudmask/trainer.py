"""Seeded mini-batch training with Adam, patience-based early stopping and
best-model checkpointing."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .datapipe import DatasetSplit, PatchSet
from .ndtensor import NonFiniteError, Tensor, backward, bce_loss, no_grad
from .unet import ModelParams, UNetConfig, build_unet, param_shapes, unet_forward

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CMCK"
CHECKPOINT_VERSION = 1
METRICS_HEADER = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "epoch_time_s"]
METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "best.ckpt"
SUMMARY_FILE = "train_summary.json"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 25
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_batch_size: int = 64

    def validate(self) -> None:
        if not self.patience < self.max_epochs:
            raise ValueError(f"patience ({self.patience}) must be < max_epochs ({self.max_epochs})")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        arrays = params.arrays()
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


@dataclass
class EarlyStopState:
    best_metric: float = math.inf
    best_epoch: int = 0
    epochs_since_improvement: int = 0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    wall_time: float


@dataclass
class RunResult:
    seed: int
    epochs_run: int
    best_epoch: int
    train_acc: float
    val_acc: float
    avg_epoch_time_s: float
    total_train_time_s: float
    checkpoint: str
    metrics_log: str
    test_acc: Optional[float] = None
    test_acc_mean_scene: Optional[float] = None
    avg_infer_time_s: Optional[float] = None
    total_infer_time_s: Optional[float] = None
    status: str = "ok"
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer and early stopping


def adam_step(params: ModelParams, grads, state: AdamState, cfg: TrainConfig) -> None:
    """One Adam update, in place on ``params`` and ``state``.

    Arithmetic runs in float64; parameters and moments are stored back in their
    own dtype.
    """
    names = params.names()
    for name, g in zip(names, grads):
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r} at step {state.t + 1}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for k, (name, tensor) in enumerate(params):
        g = grads[k]
        if g is None:
            g = np.zeros_like(tensor.data)
        g64 = g.astype(np.float64)
        m = b1 * state.m[k].astype(np.float64) + (1.0 - b1) * g64
        v = b2 * state.v[k].astype(np.float64) + (1.0 - b2) * g64 * g64
        update = cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        tensor.data = (tensor.data.astype(np.float64) - update).astype(tensor.data.dtype)
        state.m[k] = m.astype(state.m[k].dtype)
        state.v[k] = v.astype(state.v[k].dtype)


def early_stop_update(state: EarlyStopState, val_metric: float, epoch: int, patience: int) -> bool:
    """Record ``val_metric`` for ``epoch`` (1-based); return True when training should stop.

    Only a strictly lower metric counts as improvement.
    """
    if not math.isfinite(val_metric):
        raise NonFiniteError(f"validation metric at epoch {epoch} is not finite: {val_metric}")
    if val_metric < state.best_metric:
        state.best_metric = val_metric
        state.best_epoch = epoch
    state.epochs_since_improvement = epoch - state.best_epoch
    return state.epochs_since_improvement >= patience


# ---------------------------------------------------------------------------
# checkpoint I/O


class CheckpointError(Exception):
    """Base class for unreadable or incompatible checkpoints."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


_CONFIG_FIELDS = ("in_channels", "depth", "base_channels", "kernel_size", "patch_size")
_MAX_RANK = 8


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode()
    out = [struct.pack("<H", len(raw)), raw, struct.pack("<B", arr.ndim)]
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(params: ModelParams, adam_state: AdamState | None, path) -> Path:
    """Write magic, version, config echo, parameter tensors and optional Adam moments."""
    path = Path(path)
    cfg = params.config
    chunks = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    chunks.append(struct.pack("<5I", *(getattr(cfg, f) for f in _CONFIG_FIELDS)))
    chunks.append(struct.pack("<I", len(params)))
    for name, tensor in params:
        chunks.append(_pack_tensor(name, tensor.data))
    if adam_state is None:
        chunks.append(struct.pack("<B", 0))
    else:
        chunks.append(struct.pack("<BQ", 1, adam_state.t))
        for name, m in zip(params.names(), adam_state.m):
            chunks.append(_pack_tensor(f"adam.m.{name}", m))
        for name, v in zip(params.names(), adam_state.v):
            chunks.append(_pack_tensor(f"adam.v.{name}", v))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(
                f"{self.path}: truncated reading {what} (need {n} bytes at offset {self.pos}, "
                f"file has {len(self.buf)})"
            )
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensor(self, expect_name: str, expect_shape: tuple[int, ...]) -> np.ndarray:
        (nlen,) = self.unpack("<H", f"name length of {expect_name}")
        name = self.take(nlen, f"name of {expect_name}").decode("utf-8", errors="replace")
        if name != expect_name:
            raise CheckpointCorruptError(f"{self.path}: expected tensor {expect_name!r}, found {name!r}")
        (rank,) = self.unpack("<B", f"rank of {name}")
        if rank > _MAX_RANK:
            raise CheckpointCorruptError(f"{self.path}: tensor {name!r} has implausible rank {rank}")
        dims = self.unpack(f"<{rank}I", f"dims of {name}")
        if tuple(dims) != tuple(expect_shape):
            raise CheckpointCorruptError(
                f"{self.path}: tensor {name!r} has shape {tuple(dims)}, layout requires {tuple(expect_shape)}"
            )
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(self.take(4 * count, f"values of {name}"), dtype="<f4").reshape(dims)
        if not np.isfinite(arr).all():
            raise CheckpointCorruptError(f"{self.path}: tensor {name!r} contains non-finite values")
        return arr.astype(np.float32)


def load_checkpoint(path, expected_config: UNetConfig | None = None) -> tuple[ModelParams, AdamState | None]:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: expected magic {CHECKPOINT_MAGIC!r}, found {magic!r}")
    (version,) = r.unpack("<H", "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    values = r.unpack("<5I", "config echo")
    try:
        cfg = UNetConfig(**dict(zip(_CONFIG_FIELDS, values)))
        cfg.validate()
    except ValueError as exc:
        raise CheckpointCorruptError(f"{path}: stored config is invalid: {exc}") from exc
    if expected_config is not None and cfg != expected_config:
        raise ConfigMismatchError(f"{path}: checkpoint holds {cfg}, caller expects {expected_config}")
    layout = param_shapes(cfg)
    (count,) = r.unpack("<I", "tensor count")
    if count != len(layout):
        raise CheckpointCorruptError(f"{path}: tensor count {count}, config layout has {len(layout)}")
    tensors = {name: Tensor(r.tensor(name, shape), requires_grad=True, name=name) for name, shape in layout}
    params = ModelParams(cfg, tensors)
    (has_adam,) = r.unpack("<B", "adam flag")
    adam = None
    if has_adam == 1:
        (t,) = r.unpack("<Q", "adam step")
        m = [r.tensor(f"adam.m.{n}", s) for n, s in layout]
        v = [r.tensor(f"adam.v.{n}", s) for n, s in layout]
        adam = AdamState(m, v, t)
    elif has_adam != 0:
        raise CheckpointCorruptError(f"{path}: bad adam flag {has_adam}")
    if r.pos != len(r.buf):
        raise CheckpointCorruptError(f"{path}: {len(r.buf) - r.pos} trailing bytes after checkpoint")
    return params, adam


# ---------------------------------------------------------------------------
# training loop


def _targets(masks: np.ndarray) -> np.ndarray:
    return masks[:, None, :, :].astype(np.float32)


def evaluate_patches(params: ModelParams, patches: PatchSet, batch_size: int = 64) -> tuple[float, float]:
    """Mean BCE and pixel accuracy (threshold 0.5) over a patch set."""
    if len(patches) == 0:
        return float("nan"), float("nan")
    loss_sum = 0.0
    correct = 0
    total = 0
    with no_grad():
        for start in range(0, len(patches), batch_size):
            x = patches.images[start:start + batch_size]
            t = _targets(patches.masks[start:start + batch_size])
            probs = unet_forward(params, Tensor(x))
            loss_sum += bce_loss(probs, t).item() * t.size
            correct += int(((probs.data > 0.5) == (t > 0.5)).sum())
            total += t.size
    return loss_sum / total, correct / total


def _fmt(x: float) -> str:
    return repr(float(x))


def prepare_out_dir(out_dir) -> Path:
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        raise FileExistsError(f"refusing to train into non-empty directory {out}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def train(model_cfg: UNetConfig, train_cfg: TrainConfig, split: DatasetSplit, out_dir) -> RunResult:
    """Train from scratch into ``out_dir``; returns a RunResult for the best epoch.

    Writes ``metrics.csv`` (one row per epoch, flushed as it goes),
    ``best.ckpt`` (rewritten whenever validation loss improves) and a JSON
    summary.  ``out_dir`` must be empty or absent.
    """
    model_cfg.validate()
    train_cfg.validate()
    out = prepare_out_dir(out_dir)
    params = build_unet(model_cfg, train_cfg.seed)
    adam = AdamState.zeros_like(params)
    stopper = EarlyStopState()
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([train_cfg.seed, 1]))
    n = len(split.train)
    if n == 0:
        raise ValueError("training split is empty")
    metrics_path = out / METRICS_FILE
    ckpt_path = out / CHECKPOINT_FILE
    records: list[EpochRecord] = []
    best_record: EpochRecord | None = None

    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        fh.flush()
        for epoch in range(1, train_cfg.max_epochs + 1):
            t0 = time.perf_counter()
            order = shuffle_rng.permutation(n)
            for b, start in enumerate(range(0, n, train_cfg.batch_size)):
                idx = order[start:start + train_cfg.batch_size]
                x = Tensor(split.train.images[idx])
                t = _targets(split.train.masks[idx])
                loss = bce_loss(unet_forward(params, x), t)
                if not math.isfinite(loss.item()):
                    raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
                for _, p in params:
                    p.zero_grad()
                backward(loss)
                adam_step(params, [p.grad for _, p in params], adam, train_cfg)
            train_loss, train_acc = evaluate_patches(params, split.train, train_cfg.eval_batch_size)
            val_loss, val_acc = evaluate_patches(params, split.val, train_cfg.eval_batch_size)
            record = EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc, time.perf_counter() - t0)
            records.append(record)
            writer.writerow([epoch] + [_fmt(v) for v in (train_loss, train_acc, val_loss, val_acc)]
                            + [f"{record.wall_time:.6f}"])
            fh.flush()
            stop = early_stop_update(stopper, val_loss, epoch, train_cfg.patience)
            if stopper.best_epoch == epoch:
                save_checkpoint(params, adam, ckpt_path)
                best_record = record
            log.info(
                "epoch %d train_loss %.4f train_acc %.4f val_loss %.4f val_acc %.4f (%.2fs)",
                epoch, train_loss, train_acc, val_loss, val_acc, record.wall_time,
            )
            if stop:
                break

    total_time = sum(r.wall_time for r in records)
    result = RunResult(
        seed=train_cfg.seed,
        epochs_run=len(records),
        best_epoch=stopper.best_epoch,
        train_acc=best_record.train_acc,
        val_acc=best_record.val_acc,
        avg_epoch_time_s=total_time / len(records),
        total_train_time_s=total_time,
        checkpoint=str(ckpt_path),
        metrics_log=str(metrics_path),
    )
    (out / SUMMARY_FILE).write_text(json.dumps(result.to_dict(), indent=2))
    return result


def read_metrics(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["train_acc"]),
                    float(r["val_loss"]), float(r["val_acc"]), float(r["epoch_time_s"]))
        for r in rows
    ]
