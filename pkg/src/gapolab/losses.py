"""Bradley-Terry preference probability, the tractable diffusion DPO loss and
its gap-aware variant.

For a pair (winner w, loser l) with one shared timestep t and noise tensors
eps_w, eps_l, let e_pol(v) and e_ref(v) be the per-element mean squared
noise-prediction errors of the policy and the frozen reference. Then

    z    = -beta * T * omega(lambda_t) * ((e_pol(w) - e_ref(w)) - (e_pol(l) - e_ref(l)))
    dpo  = -log sigmoid(z)
    gapo = (alpha ** r_w - alpha ** r_l) * dpo

By default eps_w and eps_l are the same tensor, so swapping the two clips
exactly negates z. Gradients flow only through the two policy terms; the gap
factor is a constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import denoiser as net
from .errors import NumericError, ShapeError
from .rng import stream
from .scenes import SceneCondition

OMEGA_MODES = ("constant_one", "inv_one_plus_snr")
TIMESTEP_RULES = ("uniform_shared",)
NOISE_RULES = ("shared", "independent")


@dataclass(frozen=True)
class GapoConfig:
    beta: float = 500.0
    alpha: float = 2.0
    omega_mode: str = "inv_one_plus_snr"
    timestep_rule: str = "uniform_shared"
    noise_rule: str = "shared"

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not self.alpha > 1:
            raise ValueError(f"alpha must exceed 1, got {self.alpha}")
        if self.omega_mode not in OMEGA_MODES:
            raise ValueError(f"unknown omega mode {self.omega_mode!r}")
        if self.timestep_rule not in TIMESTEP_RULES:
            raise ValueError(f"unknown timestep rule {self.timestep_rule!r}")
        if self.noise_rule not in NOISE_RULES:
            raise ValueError(f"unknown noise rule {self.noise_rule!r}")


@dataclass(eq=False)
class PreferencePair:
    initial_frame: np.ndarray
    condition: SceneCondition
    winner: np.ndarray
    loser: np.ndarray
    winner_reward: float
    loser_reward: float
    scene_seed: int | None = None

    def __post_init__(self):
        for name in ("winner_reward", "loser_reward"):
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {r}")
        if self.winner_reward < self.loser_reward:
            raise ValueError(f"winner reward {self.winner_reward} is below loser reward {self.loser_reward}")


def bt_probability(r_w: float, r_l: float) -> float:
    """p(w preferred over l) = sigmoid(r_w - r_l)."""
    if not (np.isfinite(r_w) and np.isfinite(r_l)):
        raise ValueError("rewards must be finite")
    return float(expit(r_w - r_l))


def reward_gain(r_norm: float, alpha: float) -> float:
    if not 0.0 <= r_norm <= 1.0:
        raise ValueError(f"normalized reward must lie in [0, 1], got {r_norm}")
    if not alpha > 1:
        raise ValueError(f"alpha must exceed 1, got {alpha}")
    return float(alpha**r_norm)


def gap_factor(pair: PreferencePair, alpha: float) -> float:
    return reward_gain(pair.winner_reward, alpha) - reward_gain(pair.loser_reward, alpha)


def omega(snr_value, mode: str = "constant_one"):
    """Per-timestep weight of the inner DPO argument.

    ``inv_one_plus_snr`` is 1 / (1 + lambda_t), which equals sigma_t**2 on a
    variance-preserving schedule: it turns each noise-prediction error into an
    alpha_t**2-weighted clean-clip error, so the nearly noise-free steps no
    longer dominate the gradient.
    """
    lam = np.asarray(snr_value, dtype=np.float64)
    if mode == "constant_one":
        return np.ones_like(lam)
    if mode == "inv_one_plus_snr":
        return 1.0 / (1.0 + lam)
    raise ValueError(f"unknown omega mode {mode!r}")


@dataclass
class DpoTerms:
    losses: np.ndarray     # per pair
    inner: np.ndarray      # z, the argument of log sigmoid
    margins: np.ndarray    # (e_ref(w) - e_pol(w)) - (e_ref(l) - e_pol(l)); positive favours the winner
    timesteps: np.ndarray
    grad: np.ndarray | None


def draw_pair_noise(pair: PreferencePair, schedule, seed: int, noise_rule: str = "shared"):
    """The shared timestep and the winner/loser noise tensors for one pair.

    Under the ``shared`` rule both branches see the same noise tensor.
    """
    rng = stream(seed, "dpo")
    t = int(rng.integers(1, schedule.T + 1))
    eps_w = rng.standard_normal(np.shape(pair.winner))
    if noise_rule == "shared":
        return t, eps_w, eps_w
    return t, eps_w, rng.standard_normal(np.shape(pair.loser))


def _check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite value in {name}")


def dpo_terms(policy, reference, pairs, schedule, config: GapoConfig, seeds, weights=None) -> DpoTerms:
    """Per-pair DPO losses and, when ``weights`` is given, the gradient of
    sum_i weights[i] * loss_i with respect to the policy parameters."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs")
    if len(seeds) != len(pairs):
        raise ShapeError("need one seed per pair")
    n = len(pairs)
    ts, clips, noises, conds, inits = [], [], [], [], []
    for pair, seed in zip(pairs, seeds):
        t, eps_w, eps_l = draw_pair_noise(pair, schedule, seed, config.noise_rule)
        ts.append(t)
        clips.append((pair.winner, pair.loser))
        noises.append((eps_w, eps_l))
        conds.append(net.encode_condition(pair.condition))
        inits.append(pair.initial_frame)
    t = np.asarray(ts)
    # rows 0..n-1 are winners, n..2n-1 losers
    x0 = np.stack([c[0] for c in clips] + [c[1] for c in clips]).astype(np.float64)
    eps = np.stack([e[0] for e in noises] + [e[1] for e in noises])
    t2 = np.concatenate([t, t])
    a = schedule.alpha_at(t2)[:, None, None, None]
    s = schedule.sigma_at(t2)[:, None, None, None]
    x_t = a * x0 + s * eps
    cond2 = np.concatenate([np.stack(conds)] * 2)
    init2 = np.concatenate([np.stack(inits)] * 2).astype(np.float64)

    pol, cache = net.forward(policy, x_t, t2, cond2, init2)
    ref, _ = net.forward(reference, x_t, t2, cond2, init2)
    d = x0[0].size
    err_pol = ((pol - eps) ** 2).reshape(2 * n, -1).mean(axis=1)
    err_ref = ((ref - eps) ** 2).reshape(2 * n, -1).mean(axis=1)
    _check_finite("policy noise-prediction error", err_pol)
    _check_finite("reference noise-prediction error", err_ref)

    lam = schedule.alpha_at(t) ** 2 / schedule.sigma_at(t) ** 2
    scale = config.beta * schedule.T * omega(lam, config.omega_mode)
    diff = (err_pol[:n] - err_ref[:n]) - (err_pol[n:] - err_ref[n:])
    z = -scale * diff
    _check_finite("inner DPO argument", z)
    losses = np.logaddexp(0.0, -z)
    _check_finite("DPO loss", losses)

    grad = None
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)
        dz = -w * expit(-z)                    # d(sum w*loss)/dz
        d_diff = -scale * dz                   # dz/d(diff) = -scale
        coef = np.concatenate([d_diff, -d_diff])  # d(diff)/d(err_pol): +1 winners, -1 losers
        g_out = coef[:, None, None, None] * 2.0 * (pol - eps) / d
        grad = net.backward(policy, cache, g_out)
        _check_finite("DPO gradient", grad)
    return DpoTerms(losses=losses, inner=z, margins=-diff, timesteps=t, grad=grad)


def dpo_loss_and_grad(policy, reference, pair: PreferencePair, schedule, config: GapoConfig, seed: int):
    terms = dpo_terms(policy, reference, [pair], schedule, config, [seed], weights=[1.0])
    return float(terms.losses[0]), terms.grad


def gapo_loss_and_grad(policy, reference, pair: PreferencePair, schedule, config: GapoConfig, seed: int):
    factor = gap_factor(pair, config.alpha)
    loss, grad = dpo_loss_and_grad(policy, reference, pair, schedule, config, seed)
    return factor * loss, factor * grad
