"""Toy conditional noise-prediction network with hand-written reverse mode.

Input row: [flattened x_t, sinusoidal time embedding, condition encoding,
flattened initial frame] -> SiLU(128) -> SiLU(128) -> linear readout m.
A learned gain g(t), linear in the time embedding, carries x_t past the
128-wide bottleneck. Two output heads are available:

* ``scaled`` (default): eps_hat = (g(t) * x_t - alpha_t * m) / sigma_t, so m plays
  the role of a clean-clip estimate and the 1/sigma_t range is supplied by the
  schedule instead of being learned;
* ``plain``: eps_hat = g(t) * x_t + m.

Either way all-zero parameters give an all-zero output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import expit

from .errors import ShapeError
from .rng import stream
from .schedule import build_schedule
from .scenes import FRAMES, HEIGHT, WIDTH, SceneCondition, character_texture

TIME_DIM = 16
COND_DIM = 11
HIDDEN = 128
HEADS = ("scaled", "plain")


@dataclass(frozen=True)
class Layout:
    frames: int = FRAMES
    height: int = HEIGHT
    width: int = WIDTH
    timesteps: int = 64
    hidden: int = HIDDEN
    time_dim: int = TIME_DIM
    cond_dim: int = COND_DIM
    schedule: str = "cosine"
    head: str = "scaled"

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown output head {self.head!r}")

    @property
    def clip_shape(self) -> tuple[int, int, int]:
        return (self.frames, self.height, self.width)

    @property
    def clip_size(self) -> int:
        return self.frames * self.height * self.width

    @property
    def input_width(self) -> int:
        return self.clip_size + self.time_dim + self.cond_dim + self.height * self.width

    @cached_property
    def layers(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        d, h, o = self.input_width, self.hidden, self.clip_size
        return (
            ("w1", (d, h)), ("b1", (h,)),
            ("w2", (h, h)), ("b2", (h,)),
            ("w3", (h, o)), ("b3", (o,)),
            ("skip_w", (self.time_dim,)), ("skip_b", (1,)),
        )

    @cached_property
    def param_count(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.layers)

    def to_json(self) -> str:
        return json.dumps({
            "frames": self.frames, "height": self.height, "width": self.width,
            "timesteps": self.timesteps, "hidden": self.hidden,
            "time_dim": self.time_dim, "cond_dim": self.cond_dim,
            "schedule": self.schedule, "head": self.head,
            "layers": [[name, list(shape)] for name, shape in self.layers],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Layout":
        d = json.loads(text)
        layout = cls(d["frames"], d["height"], d["width"], d["timesteps"], d["hidden"], d["time_dim"],
                     d["cond_dim"], d["schedule"], d["head"])
        if [[n, list(s)] for n, s in layout.layers] != d["layers"]:
            raise ValueError("layout descriptor layer list does not match its dimensions")
        return layout


@dataclass(eq=False)
class DenoiserParams:
    vector: np.ndarray
    layout: Layout = field(default_factory=Layout)

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.shape != (self.layout.param_count,):
            raise ShapeError(f"expected {self.layout.param_count} parameters, got shape {self.vector.shape}")

    @property
    def param_count(self) -> int:
        return self.layout.param_count

    def views(self, vector=None) -> dict[str, np.ndarray]:
        vector = self.vector if vector is None else vector
        out, offset = {}, 0
        for name, shape in self.layout.layers:
            n = int(np.prod(shape))
            out[name] = vector[offset:offset + n].reshape(shape)
            offset += n
        return out

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.vector.copy(), self.layout)

    def with_vector(self, vector) -> "DenoiserParams":
        return DenoiserParams(vector, self.layout)


def init_params(layout: Layout | None = None, seed: int = 0) -> DenoiserParams:
    """Fan-in scaled uniform weights and zero biases; the scaled head starts
    with a unit x_t gain."""
    layout = layout or Layout()
    rng = stream(seed, "init")
    params = DenoiserParams(np.zeros(layout.param_count), layout)
    v = params.views()
    for name in ("w1", "w2", "w3"):
        bound = 1.0 / np.sqrt(v[name].shape[0])
        v[name][...] = rng.uniform(-bound, bound, size=v[name].shape)
    v["skip_w"][...] = rng.uniform(-0.25, 0.25, size=v["skip_w"].shape)
    if layout.head == "scaled":
        v["skip_b"][...] = 1.0
    return params


def time_embedding(t, timesteps: int, dim: int = TIME_DIM) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = 0.5 * np.pi * 2.0 ** np.arange(dim // 2)
    phase = (t / timesteps)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)


def encode_condition(cond: SceneCondition) -> np.ndarray:
    vy, vx = cond.velocity
    return np.concatenate([[vy / 2.0, vx / 2.0, cond.brightness], character_texture(cond.character_id)])


def _silu(x):
    s = expit(x)
    return x * s, s


def forward(params: DenoiserParams, x_t, t, cond_enc, initial_frames):
    """Batched forward pass.

    x_t: (B, F, H, W); t: (B,) ints; cond_enc: (B, 11); initial_frames: (B, H, W).
    Returns the predicted noise (B, F, H, W) and a cache for ``backward``.
    """
    layout = params.layout
    x_t = np.asarray(x_t, dtype=np.float64)
    b = x_t.shape[0]
    if x_t.shape[1:] != layout.clip_shape:
        raise ShapeError(f"x_t shape {x_t.shape[1:]} does not match network clip shape {layout.clip_shape}")
    initial_frames = np.asarray(initial_frames, dtype=np.float64)
    if initial_frames.shape != (b, layout.height, layout.width):
        raise ShapeError(f"initial frames shape {initial_frames.shape} does not match batch of {b}")
    cond_enc = np.asarray(cond_enc, dtype=np.float64).reshape(b, layout.cond_dim)
    t = np.broadcast_to(np.asarray(t), (b,))
    if np.any(t < 1) or np.any(t > layout.timesteps):
        raise ValueError(f"timesteps must lie in [1, {layout.timesteps}]")

    p = params.views()
    xf = x_t.reshape(b, -1)
    emb = time_embedding(t, layout.timesteps, layout.time_dim)
    inp = np.concatenate([xf, emb, cond_enc, initial_frames.reshape(b, -1)], axis=1)
    h1 = inp @ p["w1"] + p["b1"]
    a1, s1 = _silu(h1)
    h2 = a1 @ p["w2"] + p["b2"]
    a2, s2 = _silu(h2)
    gain = emb @ p["skip_w"] + p["skip_b"][0]
    m = a2 @ p["w3"] + p["b3"]
    if layout.head == "scaled":
        sched = build_schedule(layout.timesteps, layout.schedule)
        c_x, c_m = 1.0 / sched.sigma_at(t), -sched.alpha_at(t) / sched.sigma_at(t)
    else:
        c_x, c_m = np.ones(b), np.ones(b)
    out = c_x[:, None] * gain[:, None] * xf + c_m[:, None] * m
    cache = (inp, emb, xf, h1, s1, a1, h2, s2, a2, c_x, c_m)
    return out.reshape(x_t.shape), cache


def backward(params: DenoiserParams, cache, grad_out) -> np.ndarray:
    """Gradient of sum(grad_out * output) with respect to the flat parameter vector."""
    inp, emb, xf, h1, s1, a1, h2, s2, a2, c_x, c_m = cache
    p = params.views()
    g_out = np.asarray(grad_out, dtype=np.float64).reshape(xf.shape)
    grad = np.zeros(params.param_count)
    gv = params.views(grad)

    g = c_m[:, None] * g_out
    gv["w3"][...] = a2.T @ g
    gv["b3"][...] = g.sum(axis=0)
    dgain = c_x * (g_out * xf).sum(axis=1)
    gv["skip_w"][...] = emb.T @ dgain
    gv["skip_b"][...] = dgain.sum()

    da2 = g @ p["w3"].T
    dh2 = da2 * (s2 * (1.0 + h2 * (1.0 - s2)))
    gv["w2"][...] = a1.T @ dh2
    gv["b2"][...] = dh2.sum(axis=0)

    da1 = dh2 @ p["w2"].T
    dh1 = da1 * (s1 * (1.0 + h1 * (1.0 - s1)))
    gv["w1"][...] = inp.T @ dh1
    gv["b1"][...] = dh1.sum(axis=0)
    return grad


def denoiser_predict(params: DenoiserParams, x_t, t: int, cond: SceneCondition, initial_frame) -> np.ndarray:
    """Predicted noise for a single clip."""
    x_t = np.asarray(x_t, dtype=np.float64)
    out, _ = forward(params, x_t[None], np.array([t]), encode_condition(cond)[None], np.asarray(initial_frame)[None])
    return out[0]
