"""Pretraining, SFT and preference fine-tuning loops, plus checkpoint files.

Every loop is a deterministic function of (config, data, initial parameters):
batch indices, timesteps and noises all come from named streams of
``config.seed``.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import denoiser as net
from .diffusion import DiffusionBatch, dm_loss_and_grad
from .errors import ChecksumError, MagicError, NumericError, TruncatedError, VersionError
from .losses import GapoConfig, dpo_terms, gap_factor
from .rng import stream

log = logging.getLogger(__name__)

MODES = ("pretrain", "sft", "dpo", "gapo")
OPTIMIZERS = ("adam", "sgd")
METRIC_COLUMNS = ("step", "loss", "margin_mean", "gap_factor_mean", "grad_norm")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "pretrain"
    steps: int = 3000
    batch_size: int = 8
    learning_rate: float = 1e-3
    gapo: GapoConfig = field(default_factory=GapoConfig)
    seed: int = 0
    checkpoint_interval: int = 0
    optimizer: str = "adam"
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.steps < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ValueError("need steps >= 0, batch_size >= 1 and learning_rate > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def default_config(mode: str, **overrides) -> TrainConfig:
    """Desk-scale defaults: 3000 pretraining steps at 1e-3, 600 fine-tuning steps at 2e-4."""
    if mode == "pretrain":
        base = TrainConfig(mode=mode, steps=3000, learning_rate=1e-3)
    else:
        base = TrainConfig(mode=mode, steps=600, learning_rate=2e-4)
    return replace(base, **overrides)


class Adam:
    def __init__(self, size: int, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, w: np.ndarray, g: np.ndarray) -> None:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        w -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, size: int, lr: float):
        self.lr = lr

    def step(self, w: np.ndarray, g: np.ndarray) -> None:
        w -= self.lr * g


def _optimizer(config: TrainConfig, size: int):
    return Adam(size, config.learning_rate) if config.optimizer == "adam" else SGD(size, config.learning_rate)


def _clip(g: np.ndarray, max_norm):
    norm = float(np.linalg.norm(g))
    if max_norm is not None and norm > max_norm:
        g = g * (max_norm / norm)
    return g, norm


@dataclass
class TrainResult:
    params: net.DenoiserParams
    metrics: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def _run(config: TrainConfig, init: net.DenoiserParams, n_items: int, step_fn, checkpoint_dir=None) -> TrainResult:
    params = init.copy()
    w = params.vector
    opt = _optimizer(config, params.param_count)
    picker = stream(config.seed, "batches", config.mode if config.mode in ("pretrain", "sft") else "preference")
    result = TrainResult(params)
    for step in range(1, config.steps + 1):
        idx = picker.integers(0, n_items, size=config.batch_size)
        loss, grad, extra = step_fn(params, step, idx)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at step {step}")
        grad, norm = _clip(grad, config.max_grad_norm)
        if not np.isfinite(norm):
            raise NumericError(f"non-finite gradient at step {step}")
        result.metrics.append({"step": step, "loss": loss, "grad_norm": norm, **extra})
        opt.step(w, grad)
        if checkpoint_dir is not None and config.checkpoint_interval and step % config.checkpoint_interval == 0:
            path = Path(checkpoint_dir) / f"{config.mode}_step{step:06d}.ckpt"
            save_checkpoint(params, path)
            result.checkpoints.append(path)
        if step % 100 == 0:
            log.info("%s step %d loss %.6g", config.mode, step, loss)
    return result


def _dm_step_fn(config, schedule, clips, conds, inits):
    def step_fn(params, step, idx):
        rng = stream(config.seed, "noise", config.mode, step)
        t = rng.integers(1, schedule.T + 1, size=len(idx))
        eps = rng.standard_normal((len(idx),) + clips[0].shape)
        batch = DiffusionBatch(np.stack([clips[i] for i in idx]), [conds[i] for i in idx],
                               np.stack([inits[i] for i in idx]), t, eps)
        loss, grad = dm_loss_and_grad(params, batch, schedule)
        return loss, grad, {"margin_mean": 0.0, "gap_factor_mean": 0.0}
    return step_fn


def pretrain(config: TrainConfig, scenes, schedule, init: net.DenoiserParams | None = None,
             checkpoint_dir=None) -> TrainResult:
    """Minimize the noise-prediction loss on ground-truth clips."""
    if not scenes:
        raise ValueError("empty dataset")
    if init is None:
        init = net.init_params(net.Layout(*scenes[0].gt_video.shape, timesteps=schedule.T, schedule=schedule.kind),
                               seed=config.seed)
    fn = _dm_step_fn(config, schedule, [s.gt_video for s in scenes], [s.condition for s in scenes],
                     [s.initial_frame for s in scenes])
    return _run(config, init, len(scenes), fn, checkpoint_dir)


def train_sft(config: TrainConfig, pairs, baseline: net.DenoiserParams, schedule, checkpoint_dir=None) -> TrainResult:
    """Noise-prediction fine-tuning on the winner clips only."""
    if not pairs:
        raise ValueError("no pairs")
    fn = _dm_step_fn(config, schedule, [p.winner for p in pairs], [p.condition for p in pairs],
                     [p.initial_frame for p in pairs])
    return _run(config, baseline, len(pairs), fn, checkpoint_dir)


def train_preference(config: TrainConfig, pairs, baseline: net.DenoiserParams, schedule,
                     checkpoint_dir=None, gap_override: float | None = None) -> TrainResult:
    """DPO or GAPO fine-tuning; ``baseline`` is both the start point and the frozen reference.

    ``gap_override`` forces every gap factor to one value (used for consistency checks).
    """
    if config.mode not in ("dpo", "gapo"):
        raise ValueError(f"preference training needs mode dpo or gapo, got {config.mode!r}")
    if not pairs:
        raise ValueError("no pairs")
    reference = baseline.copy()
    reference.vector.setflags(write=False)
    if config.mode == "gapo":
        if gap_override is None:
            gaps = np.array([gap_factor(p, config.gapo.alpha) for p in pairs])
        else:
            gaps = np.full(len(pairs), float(gap_override))
    else:
        gaps = np.ones(len(pairs))

    def step_fn(params, step, idx):
        seeds = [int(stream(config.seed, "pair-noise", step, k).integers(0, 2**62)) for k in range(len(idx))]
        g = gaps[idx]
        terms = dpo_terms(params, reference, [pairs[i] for i in idx], schedule, config.gapo, seeds,
                          weights=g / len(idx))
        loss = float(np.mean(g * terms.losses))
        return loss, terms.grad, {"margin_mean": float(np.mean(terms.margins)), "gap_factor_mean": float(np.mean(g))}

    return _run(config, baseline, len(pairs), step_fn, checkpoint_dir)


def train(config: TrainConfig, data, baseline, schedule, checkpoint_dir=None) -> TrainResult:
    if config.mode == "pretrain":
        return pretrain(config, data, schedule, baseline, checkpoint_dir)
    if config.mode == "sft":
        return train_sft(config, data, baseline, schedule, checkpoint_dir)
    return train_preference(config, data, baseline, schedule, checkpoint_dir)


def write_metrics_csv(path, metrics) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in metrics:
            w.writerow([row["step"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"GAPO"
CKPT_VERSION = 1


def _checksum(raw: bytes) -> int:
    return int(np.frombuffer(raw, dtype="<u8").sum(dtype=np.uint64))


def save_checkpoint(params: net.DenoiserParams, path) -> None:
    """magic, u32 version, u64 param count, u32 descriptor length + JSON bytes,
    little-endian float64 parameters, u64 checksum (wrapping sum of the raw words)."""
    desc = params.layout.to_json().encode("utf-8")
    raw = np.ascontiguousarray(params.vector, dtype="<f8").tobytes()
    blob = (CKPT_MAGIC + struct.pack("<IQI", CKPT_VERSION, params.param_count, len(desc)) + desc
            + raw + struct.pack("<Q", _checksum(raw)))
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> net.DenoiserParams:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise MagicError(f"{path}: not a GAPO checkpoint")
    head = struct.calcsize("<IQI")
    if len(data) < 4 + head:
        raise TruncatedError(f"{path}: header truncated")
    version, count, dlen = struct.unpack_from("<IQI", data, 4)
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    off = 4 + head
    if len(data) != off + dlen + 8 * count + 8:
        raise TruncatedError(f"{path}: expected {off + dlen + 8 * count + 8} bytes, found {len(data)}")
    layout = net.Layout.from_json(data[off:off + dlen].decode("utf-8"))
    off += dlen
    raw = data[off:off + 8 * count]
    (stored,) = struct.unpack_from("<Q", data, off + 8 * count)
    if _checksum(raw) != stored:
        raise ChecksumError(f"{path}: checksum mismatch")
    if layout.param_count != count:
        raise TruncatedError(f"{path}: layout expects {layout.param_count} parameters, header says {count}")
    return net.DenoiserParams(np.frombuffer(raw, dtype="<f8").astype(np.float64), layout)
