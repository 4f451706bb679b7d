"""Synthetic conditioned clips: a textured bright blob gliding over a fixed
background, plus the ground-truth oracle judge used only for evaluation.

Clips are float64 arrays of shape (F, H, W) with values in [0, 1].
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import MagicError, ShapeError, TruncatedError, VersionError
from .rng import stream

FRAMES = 8
HEIGHT = 16
WIDTH = 16
N_CHARACTERS = 16
TEXTURE_DIM = 8

BLOB_SIGMA = 2.0
BLOB_CORE = 1.0  # flat-top radius: the pixel nearest the center always shows full brightness
TEXTURE_DEPTH = 0.5
CENTER_MARGIN = 3.0
MAX_SAMPLED_SPEED = 1.25  # per component; keeps sampled trajectories inside the margin box

ORACLE_WEIGHTS = (0.4, 0.3, 0.3)
ORACLE_PEAK_FRACTION = 0.15
ORACLE_MIN_PEAK = 0.1

GVID_MAGIC = b"GVID"
GVID_VERSION = 1
_GVID_HEADER = struct.Struct("<4sIIII")


@dataclass(frozen=True)
class SceneCondition:
    velocity: tuple[float, float]  # (dy, dx) in pixels per frame
    brightness: float
    character_id: int

    def __post_init__(self):
        vy, vx = self.velocity
        if not (-2.0 <= vy <= 2.0 and -2.0 <= vx <= 2.0):
            raise ValueError(f"velocity components must lie in [-2, 2], got {self.velocity}")
        if not 0.5 <= self.brightness <= 1.0:
            raise ValueError(f"brightness must lie in [0.5, 1], got {self.brightness}")
        if not 0 <= int(self.character_id) < N_CHARACTERS:
            raise ValueError(f"character_id must lie in [0, {N_CHARACTERS - 1}], got {self.character_id}")

    def to_dict(self) -> dict:
        return {
            "velocity": [float(v) for v in self.velocity],
            "brightness": float(self.brightness),
            "character_id": int(self.character_id),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneCondition":
        vy, vx = d["velocity"]
        return cls((float(vy), float(vx)), float(d["brightness"]), int(d["character_id"]))


@dataclass(frozen=True, eq=False)
class SceneInstance:
    initial_frame: np.ndarray
    condition: SceneCondition
    gt_video: np.ndarray
    seed: int
    start: tuple[float, float] = (0.0, 0.0)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.gt_video.shape


def background(height: int = HEIGHT, width: int = WIDTH) -> np.ndarray:
    """Fixed low-contrast diagonal gradient in [0.1, 0.2]."""
    y = np.arange(height)[:, None] / max(height - 1, 1)
    x = np.arange(width)[None, :] / max(width - 1, 1)
    return 0.1 + 0.05 * (x + y)


@lru_cache(maxsize=None)
def _texture_table() -> np.ndarray:
    rng = stream(0, "character-textures")
    table = rng.uniform(0.4, 1.0, size=(N_CHARACTERS, TEXTURE_DIM))
    table[:, 0] = 1.0
    table.setflags(write=False)
    return table


def character_texture(character_id: int) -> np.ndarray:
    """Radial texture profile of one identity; entry k applies at radius k + 0.5."""
    return _texture_table()[int(character_id)]


def render_frame(center, condition: SceneCondition, height: int = HEIGHT, width: int = WIDTH) -> np.ndarray:
    cy, cx = center
    yy, xx = np.mgrid[0:height, 0:width]
    r = np.hypot(yy - cy, xx - cx)
    mask = np.exp(-np.maximum(r - BLOB_CORE, 0.0) ** 2 / (2 * BLOB_SIGMA**2))
    tex = character_texture(condition.character_id)
    radii = np.concatenate([[BLOB_CORE], np.arange(1, TEXTURE_DIM) + 0.5])
    profile = np.interp(r, radii, tex)
    modulation = 1.0 - TEXTURE_DEPTH * (1.0 - profile)
    frame = (1.0 - mask) * background(height, width) + mask * condition.brightness * modulation
    return np.clip(frame, 0.0, 1.0)


def trajectory(start, velocity, frames: int, height: int, width: int) -> np.ndarray:
    """Blob centers per frame, clipped to the margin box (never wrapped)."""
    steps = np.arange(frames)[:, None]
    centers = np.asarray(start, dtype=float)[None, :] + steps * np.asarray(velocity, dtype=float)[None, :]
    lo = CENTER_MARGIN
    centers[:, 0] = np.clip(centers[:, 0], lo, height - 1 - lo)
    centers[:, 1] = np.clip(centers[:, 1], lo, width - 1 - lo)
    return centers


def render_clip(start, condition: SceneCondition, frames: int = FRAMES, height: int = HEIGHT, width: int = WIDTH) -> np.ndarray:
    centers = trajectory(start, condition.velocity, frames, height, width)
    return np.stack([render_frame(c, condition, height, width) for c in centers])


def generate_scene(
    seed: int,
    frames: int = FRAMES,
    height: int = HEIGHT,
    width: int = WIDTH,
    velocity=None,
    brightness=None,
    character_id=None,
    start=None,
) -> SceneInstance:
    """Deterministic scene from ``seed``; any of the condition fields or the
    start position may be forced through keyword arguments."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    if frames < 2:
        raise ValueError(f"need at least 2 frames, got {frames}")
    rng = stream(seed, "scene")
    draw_v = rng.uniform(-MAX_SAMPLED_SPEED, MAX_SAMPLED_SPEED, size=2)
    draw_b = rng.uniform(0.5, 1.0)
    draw_c = int(rng.integers(0, N_CHARACTERS))
    u = rng.uniform(0.0, 1.0, size=2)

    v = np.asarray(draw_v if velocity is None else velocity, dtype=float)
    cond = SceneCondition(
        (float(v[0]), float(v[1])),
        float(draw_b if brightness is None else brightness),
        int(draw_c if character_id is None else character_id),
    )
    if start is None:
        # place the start so the whole trajectory stays inside the margin box when it can
        start = []
        for dim, size in enumerate((height, width)):
            lo, hi = CENTER_MARGIN, size - 1 - CENTER_MARGIN
            travel = (frames - 1) * cond.velocity[dim]
            a, b = lo - min(travel, 0.0), hi - max(travel, 0.0)
            if a > b:
                a = b = 0.5 * (lo + hi) - 0.5 * travel
            start.append(a + u[dim] * (b - a))
    start = (float(start[0]), float(start[1]))
    gt = quantize(render_clip(start, cond, frames, height, width))
    gt.setflags(write=False)
    return SceneInstance(initial_frame=gt[0], condition=cond, gt_video=gt, seed=int(seed), start=start)


def generate_scenes(seeds) -> list[SceneInstance]:
    return [generate_scene(int(s)) for s in seeds]


# -- oracle judge -----------------------------------------------------------

def _oracle_centroids(video: np.ndarray):
    excess = video - background(video.shape[1], video.shape[2])[None]
    peak = excess.max(axis=(1, 2))
    weight = np.maximum(excess - ORACLE_PEAK_FRACTION * peak[:, None, None], 0.0)
    yy, xx = np.mgrid[0:video.shape[1], 0:video.shape[2]]
    total = weight.sum(axis=(1, 2))
    present = (peak > ORACLE_MIN_PEAK) & (total > 1e-12)
    safe = np.where(present, total, 1.0)
    cy = (weight * yy).sum(axis=(1, 2)) / safe
    cx = (weight * xx).sum(axis=(1, 2)) / safe
    return np.stack([cy, cx], axis=1), present


def measured_velocity(video: np.ndarray) -> np.ndarray:
    """Least-squares slope of the blob centroid over the frames where a blob is visible."""
    centers, present = _oracle_centroids(np.asarray(video, dtype=float))
    idx = np.flatnonzero(present)
    if idx.size < 2:
        return np.zeros(2)
    t = idx - idx.mean()
    c = centers[idx] - centers[idx].mean(axis=0)
    return (t[:, None] * c).sum(axis=0) / (t**2).sum()


def second_difference_energy(video: np.ndarray) -> float:
    video = np.asarray(video, dtype=float)
    if video.shape[0] < 3:
        return 0.0
    d2 = video[2:] - 2.0 * video[1:-1] + video[:-2]
    return float(np.mean(d2**2))


def oracle_terms(video: np.ndarray, scene: SceneInstance) -> tuple[float, float, float]:
    video = np.asarray(video, dtype=float)
    if video.shape != scene.gt_video.shape:
        raise ShapeError(f"clip shape {video.shape} does not match scene shape {scene.gt_video.shape}")
    motion = float(np.exp(-np.linalg.norm(measured_velocity(video) - np.asarray(scene.condition.velocity))))
    smooth = float(np.exp(-second_difference_energy(video)))
    fidelity = float(np.exp(-np.mean((video - scene.gt_video) ** 2)))
    return motion, smooth, fidelity


def oracle_reward(video: np.ndarray, scene: SceneInstance) -> float:
    """Ground-truth composite judge in [0, 1]; never used as a training signal."""
    terms = oracle_terms(video, scene)
    return float(sum(w * s for w, s in zip(ORACLE_WEIGHTS, terms)))


# -- persistence ------------------------------------------------------------

def write_clip(path, video: np.ndarray) -> None:
    video = np.asarray(video)
    if video.ndim != 3:
        raise ShapeError(f"clip must be 3-D (F, H, W), got shape {video.shape}")
    f, h, w = video.shape
    payload = np.ascontiguousarray(video, dtype="<f4").tobytes()
    Path(path).write_bytes(_GVID_HEADER.pack(GVID_MAGIC, GVID_VERSION, f, h, w) + payload)


def read_clip(path) -> np.ndarray:
    """Read a GVID clip back as float64 (values are exactly the stored float32s)."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != GVID_MAGIC:
        raise MagicError(f"{path}: not a GVID clip")
    if len(data) < _GVID_HEADER.size:
        raise TruncatedError(f"{path}: header truncated")
    _, version, f, h, w = _GVID_HEADER.unpack_from(data)
    if version != GVID_VERSION:
        raise VersionError(f"{path}: unsupported GVID version {version}")
    n = f * h * w
    body = data[_GVID_HEADER.size:]
    if len(body) != 4 * n:
        raise TruncatedError(f"{path}: expected {4 * n} payload bytes, found {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(f, h, w).astype(np.float64)


def quantize(video: np.ndarray) -> np.ndarray:
    """Round-trip a clip through the on-disk float32 precision."""
    return np.asarray(video, dtype=np.float32).astype(np.float64)


def save_scene_dataset(scenes, out_dir) -> Path:
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, scene in enumerate(scenes):
        name = f"clips/scene_{i:05d}_{scene.seed}.gvid"
        write_clip(out / name, scene.gt_video)
        entries.append({
            "seed": scene.seed,
            "condition": scene.condition.to_dict(),
            "start": list(scene.start),
            "file": name,
        })
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"version": 1, "instances": entries}, indent=2) + "\n")
    return manifest


def load_scene_dataset(path) -> list[SceneInstance]:
    path = Path(path)
    manifest = path / "manifest.json" if path.is_dir() else path
    root = manifest.parent
    doc = json.loads(manifest.read_text())
    scenes = []
    for e in doc["instances"]:
        clip = read_clip(root / e["file"])
        clip.setflags(write=False)
        scenes.append(SceneInstance(
            initial_frame=clip[0],
            condition=SceneCondition.from_dict(e["condition"]),
            gt_video=clip,
            seed=int(e["seed"]),
            start=tuple(e.get("start", (0.0, 0.0))),
        ))
    return scenes
