"""Variance-preserving noise schedules.

Schedules are indexed by integer steps t = 1..T; ``alpha[t - 1]`` holds alpha_t.
Both shipped kinds pin the end points alpha_1 = 0.999 and alpha_T = 0.02:

* cosine: alpha_t = cos(theta_t), sigma_t = sin(theta_t), with theta_t linear in t
  between arccos(0.999) and arccos(0.02);
* linear: sigma_t**2 linear in t between 1 - 0.999**2 and 1 - 0.02**2, and
  alpha_t = sqrt(1 - sigma_t**2).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

ALPHA_FIRST = 0.999
ALPHA_LAST = 0.02


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    sigma: np.ndarray
    kind: str = "custom"

    def alpha_at(self, t):
        return self.alpha[np.asarray(t) - 1]

    def sigma_at(self, t):
        return self.sigma[np.asarray(t) - 1]

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep must lie in [1, {self.T}], got {t}")


def check_schedule(schedule: NoiseSchedule, tol: float = 1e-12) -> None:
    a, s = schedule.alpha, schedule.sigma
    if a.shape != (schedule.T,) or s.shape != (schedule.T,):
        raise ValueError("alpha and sigma must both have length T")
    if np.max(np.abs(a**2 + s**2 - 1.0)) > tol:
        raise ValueError("schedule is not variance preserving")
    if not (np.all(np.diff(a) < 0) and np.all(np.diff(s) > 0)):
        raise ValueError("alpha must strictly decrease and sigma strictly increase")
    if not (a[0] > 0.99 and a[-1] < 0.05):
        raise ValueError("schedule end points out of range")


def build_schedule(T: int = 64, kind: str = "cosine") -> NoiseSchedule:
    return _build_schedule(int(T), kind)


@lru_cache(maxsize=None)
def _build_schedule(T: int, kind: str) -> NoiseSchedule:
    if T < 4:
        raise ValueError(f"schedule needs T >= 4, got {T}")
    u = np.arange(T) / (T - 1)
    if kind == "cosine":
        lo, hi = np.arccos(ALPHA_FIRST), np.arccos(ALPHA_LAST)
        theta = lo + u * (hi - lo)
        alpha, sigma = np.cos(theta), np.sin(theta)
    elif kind == "linear":
        v0, v1 = 1.0 - ALPHA_FIRST**2, 1.0 - ALPHA_LAST**2
        var = v0 + u * (v1 - v0)
        alpha, sigma = np.sqrt(1.0 - var), np.sqrt(var)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha.setflags(write=False)
    sigma.setflags(write=False)
    schedule = NoiseSchedule(T, alpha, sigma, kind)
    check_schedule(schedule)
    return schedule
