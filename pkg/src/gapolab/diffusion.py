"""Variance-preserving forward process, the noise-prediction objective and an
ancestral sampler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import denoiser as net
from .errors import ShapeError
from .rng import stream
from .schedule import ALPHA_FIRST, ALPHA_LAST, NoiseSchedule, build_schedule, check_schedule  # noqa: F401


def forward_diffuse(x0, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match clip shape {x0.shape}")
    schedule.check_step(t)
    return schedule.alpha_at(t) * x0 + schedule.sigma_at(t) * eps


def snr(schedule: NoiseSchedule, t: int) -> float:
    schedule.check_step(t)
    s = schedule.sigma_at(t)
    if s == 0:
        raise ZeroDivisionError(f"sigma_{t} is zero: signal-to-noise ratio is infinite")
    return float(schedule.alpha_at(t) ** 2 / s**2)


@dataclass(eq=False)
class DiffusionBatch:
    clips: np.ndarray          # (B, F, H, W)
    conditions: list
    initial_frames: np.ndarray  # (B, H, W)
    timesteps: np.ndarray      # (B,)
    noises: np.ndarray         # (B, F, H, W)

    def __post_init__(self):
        self.clips = np.asarray(self.clips, dtype=np.float64)
        self.initial_frames = np.asarray(self.initial_frames, dtype=np.float64)
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        self.noises = np.asarray(self.noises, dtype=np.float64)
        n = len(self.clips)
        if not (len(self.conditions) == len(self.initial_frames) == len(self.timesteps) == len(self.noises) == n):
            raise ShapeError("all batch fields must have the same length")
        if self.noises.shape != self.clips.shape:
            raise ShapeError("noise tensors must match clip shapes")

    def __len__(self) -> int:
        return len(self.clips)

    def cond_matrix(self) -> np.ndarray:
        return np.stack([net.encode_condition(c) for c in self.conditions]) if len(self) else np.zeros((0, net.COND_DIM))


def draw_batch(clips, conditions, initial_frames, schedule: NoiseSchedule, rng: np.random.Generator) -> DiffusionBatch:
    """Attach uniform timesteps and standard normal noise to a set of clips."""
    clips = np.asarray(clips, dtype=np.float64)
    t = rng.integers(1, schedule.T + 1, size=len(clips))
    eps = rng.standard_normal(clips.shape)
    return DiffusionBatch(clips, list(conditions), initial_frames, t, eps)


def dm_loss_and_grad(params, batch: DiffusionBatch, schedule: NoiseSchedule, with_grad: bool = True):
    """Mean over the batch of the per-element mean squared noise-prediction error,
    and its gradient with respect to the flat parameter vector."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    schedule.check_step(batch.timesteps)
    a = schedule.alpha_at(batch.timesteps)[:, None, None, None]
    s = schedule.sigma_at(batch.timesteps)[:, None, None, None]
    x_t = a * batch.clips + s * batch.noises
    pred, cache = net.forward(params, x_t, batch.timesteps, batch.cond_matrix(), batch.initial_frames)
    resid = pred - batch.noises
    per_elem = resid.size
    loss = float(np.sum(resid**2) / per_elem)
    if not with_grad:
        return loss, None
    grad = net.backward(params, cache, 2.0 * resid / per_elem)
    return loss, grad


def check_compatible(params, schedule: NoiseSchedule) -> None:
    layout = params.layout
    if schedule.T != layout.timesteps:
        raise ValueError(f"schedule has T={schedule.T} but the network expects T={layout.timesteps}")
    if layout.head == "scaled" and schedule.kind != layout.schedule:
        raise ValueError(f"network was built for a {layout.schedule} schedule, got {schedule.kind}")


def _posterior(schedule: NoiseSchedule, t: int):
    a_t, s_t = schedule.alpha_at(t), schedule.sigma_at(t)
    if t == 1:
        return 0.0, 1.0, 0.0
    a_p, s_p = schedule.alpha_at(t - 1), schedule.sigma_at(t - 1)
    a_ts = a_t / a_p
    var_ts = s_t**2 - a_ts**2 * s_p**2
    c_x = a_ts * s_p**2 / s_t**2
    c_0 = a_p * var_ts / s_t**2
    std = np.sqrt(var_ts * s_p**2 / s_t**2)
    return c_x, c_0, std


def sample(params, schedule: NoiseSchedule, cond, initial_frame, seed: int) -> np.ndarray:
    """Ancestral sampling from t = T down to 1 with clipped x0 estimates.

    A pure function of its arguments: the same seed always yields the same clip.
    """
    layout = params.layout
    check_compatible(params, schedule)
    initial_frame = np.asarray(initial_frame, dtype=np.float64)
    if initial_frame.shape != (layout.height, layout.width):
        raise ShapeError(f"initial frame shape {initial_frame.shape} does not match {(layout.height, layout.width)}")
    rng = stream(seed, "sample")
    cond_enc = net.encode_condition(cond)[None]
    init = initial_frame[None]
    x = rng.standard_normal((1,) + layout.clip_shape)
    for t in range(schedule.T, 0, -1):
        eps_hat, _ = net.forward(params, x, np.array([t]), cond_enc, init)
        x0_hat = np.clip((x - schedule.sigma_at(t) * eps_hat) / schedule.alpha_at(t), 0.0, 1.0)
        c_x, c_0, std = _posterior(schedule, t)
        x = c_x * x + c_0 * x0_hat
        if t > 1:
            x = x + std * rng.standard_normal(x.shape)
    return np.clip(x[0], 0.0, 1.0)
