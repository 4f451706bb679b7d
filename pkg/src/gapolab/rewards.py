"""Six-dimension analytic reward for generated clips and its weighted aggregate.

Each scorer maps a clip (and, where needed, its conditioning) to [0, 1]:

================  =====================================================
smooth            exp(-50 * mean squared temporal second difference)
motion            d / (d + 0.5), d = mean centroid step of the character
appeal            mean over 4 keyframes of (contrast + dynamic range) / 2
text_consistency  velocity and brightness agreement with the condition
image_consistency histogram cosine to the initial frame, mapped to [0, 1]
character_cons.   ring-descriptor cosine to the identity reference
================  =====================================================
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage

from .errors import ShapeError
from .scenes import HEIGHT, WIDTH, SceneCondition, background, render_frame

DIMENSIONS = ("smooth", "motion", "appeal", "text_consistency", "image_consistency", "character_consistency")

SMOOTH_SCALE = 50.0
MOTION_HALF_SPEED = 0.5
SEGMENT_LEVEL = 0.15
HIST_BINS = 32
N_KEYFRAMES = 4
N_RINGS = 8
CONTRAST_SCALE = 2.0  # std of a [0, 1] image is at most 0.5

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class WeightStrategy:
    name: str
    weights: tuple[float, ...]

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (6,) or np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
            raise ValueError(f"strategy {self.name!r} needs 6 non-negative weights with a positive sum, got {self.weights}")
        if abs(w.sum() - 1.0) > 1e-12:  # already-normalized weights are kept bit-exact
            w = w / w.sum()
        object.__setattr__(self, "weights", tuple(float(x) for x in w))

    @classmethod
    def parse(cls, text: str, name: str | None = None) -> "WeightStrategy":
        """Build from a ratio string such as ``"3:5:3:3:3:3"``."""
        parts = [float(x) for x in text.split(":")]
        return cls(name or text, tuple(parts))


UNIFORM = WeightStrategy("1:1:1:1:1:1", (1, 1, 1, 1, 1, 1))
ABLATION_STRATEGIES = (
    WeightStrategy.parse("0:0:1:1:1:1"),
    WeightStrategy.parse("3:5:3:3:3:3"),
    WeightStrategy.parse("3:3:6:4:4:4"),
    UNIFORM,
)


def strategy_by_name(name: str) -> WeightStrategy:
    if name == "uniform":
        return UNIFORM
    return WeightStrategy.parse(name)


@dataclass(frozen=True)
class RewardVector:
    smooth: float
    motion: float
    appeal: float
    text_consistency: float
    image_consistency: float
    character_consistency: float
    weights: tuple[float, ...]
    aggregate: float
    strategy: str = UNIFORM.name

    @property
    def scores(self) -> tuple[float, ...]:
        return tuple(getattr(self, d) for d in DIMENSIONS)


def aggregate_reward(scores, strategy: WeightStrategy = UNIFORM) -> RewardVector:
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != (6,):
        raise ValueError(f"need 6 dimension scores, got shape {s.shape}")
    if np.any(~np.isfinite(s)) or np.any(s < 0.0) or np.any(s > 1.0):
        raise ValueError(f"dimension scores must lie in [0, 1], got {s.tolist()}")
    agg = float(sum(w * x for w, x in zip(strategy.weights, s)))
    return RewardVector(*(float(x) for x in s), weights=strategy.weights, aggregate=agg, strategy=strategy.name)


# -- character segmentation and measurement ----------------------------------

def segment_character(frame) -> np.ndarray:
    """Largest 4-connected region brighter than the background by the segment level."""
    frame = np.asarray(frame, dtype=np.float64)
    above = frame > background(*frame.shape) + SEGMENT_LEVEL
    labels, n = ndimage.label(above, structure=_FOUR_CONNECTED)
    if n == 0:
        return np.zeros(frame.shape, dtype=bool)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def _mask_centroid(frame, mask):
    w = np.where(mask, frame - background(*frame.shape) - SEGMENT_LEVEL, 0.0)
    w = np.maximum(w, 0.0)
    total = w.sum()
    if total <= 0:
        ys, xs = np.nonzero(mask)
        return np.array([ys.mean(), xs.mean()])
    yy, xx = np.mgrid[0:frame.shape[0], 0:frame.shape[1]]
    return np.array([(w * yy).sum() / total, (w * xx).sum() / total])


def track_character(video):
    """Per-frame (mask, centroid or None)."""
    out = []
    for frame in np.asarray(video, dtype=np.float64):
        mask = segment_character(frame)
        out.append((mask, _mask_centroid(frame, mask) if mask.any() else None))
    return out


def _steps(track) -> np.ndarray:
    steps = [b[1] - a[1] for a, b in zip(track, track[1:]) if a[1] is not None and b[1] is not None]
    return np.array(steps).reshape(-1, 2)


def measure_motion(video):
    """Mean step vector, mean step length and mean peak brightness of the tracked character."""
    video = np.asarray(video, dtype=np.float64)
    track = track_character(video)
    steps = _steps(track)
    if len(steps) == 0:
        velocity, speed = np.zeros(2), 0.0
    else:
        velocity, speed = steps.mean(axis=0), float(np.linalg.norm(steps, axis=1).mean())
    peaks = [frame[mask].max() for frame, (mask, _) in zip(video, track) if mask.any()]
    brightness = float(np.mean(peaks)) if peaks else 0.0
    return velocity, speed, brightness


# -- the six scorers ---------------------------------------------------------

def _check_clip(video, min_frames: int) -> np.ndarray:
    video = np.asarray(video, dtype=np.float64)
    if video.ndim != 3:
        raise ShapeError(f"clip must have shape (F, H, W), got {video.shape}")
    if video.shape[0] < min_frames:
        raise ShapeError(f"clip needs at least {min_frames} frames, got {video.shape[0]}")
    return video


def score_smoothness(video) -> float:
    video = _check_clip(video, 3)
    d2 = video[2:] - 2.0 * video[1:-1] + video[:-2]
    return float(np.exp(-SMOOTH_SCALE * np.mean(d2**2)))


def score_motion(video) -> float:
    video = _check_clip(video, 2)
    _, speed, _ = measure_motion(video)
    return float(speed / (speed + MOTION_HALF_SPEED))


def extract_keyframes(video, k: int) -> list[int]:
    """Greedy farthest-point frame selection seeded at frame 0, sorted ascending."""
    video = _check_clip(video, 1)
    n = video.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= K <= {n}, got {k}")
    flat = video.reshape(n, -1)
    dist = np.linalg.norm(flat[:, None, :] - flat[None, :, :], axis=2)
    chosen = [0]
    nearest = dist[0].copy()
    while len(chosen) < k:
        nearest[chosen] = -1.0
        nxt = int(np.argmax(nearest))  # argmax returns the first index on ties
        chosen.append(nxt)
        nearest = np.minimum(nearest, dist[nxt])
    return sorted(chosen)


def frame_appeal(frame) -> float:
    frame = np.asarray(frame, dtype=np.float64)
    if np.ptp(frame) == 0:
        return 0.0  # std of a constant frame can round to a few ulps
    contrast = min(1.0, CONTRAST_SCALE * float(frame.std()))
    lo, hi = np.percentile(frame, [5, 95])
    return 0.5 * (contrast + float(hi - lo))


def score_appeal(video) -> float:
    video = _check_clip(video, 1)
    keys = extract_keyframes(video, min(N_KEYFRAMES, video.shape[0]))
    return float(np.clip(np.mean([frame_appeal(video[i]) for i in keys]), 0.0, 1.0))


def score_text_consistency(video, cond: SceneCondition) -> float:
    video = _check_clip(video, 2)
    velocity, _, brightness = measure_motion(video)
    dv = np.linalg.norm(velocity - np.asarray(cond.velocity, dtype=np.float64))
    return float(np.exp(-dv) * np.exp(-abs(brightness - cond.brightness)))


def intensity_histogram(frame) -> np.ndarray:
    hist, _ = np.histogram(np.asarray(frame, dtype=np.float64), bins=HIST_BINS, range=(0.0, 1.0))
    return hist.astype(np.float64)


def _cos_to_unit(a, b) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip((np.dot(a, b) / (na * nb) + 1.0) / 2.0, 0.0, 1.0))


def score_image_consistency(video, initial_frame) -> float:
    video = _check_clip(video, 1)
    initial_frame = np.asarray(initial_frame, dtype=np.float64)
    if initial_frame.shape != video.shape[1:]:
        raise ShapeError(f"initial frame shape {initial_frame.shape} does not match clip frames {video.shape[1:]}")
    ref = intensity_histogram(initial_frame)
    return float(np.mean([_cos_to_unit(intensity_histogram(f), ref) for f in video]))


def character_descriptor(frame, mask=None) -> np.ndarray:
    """Mean intensity in unit-width rings around the mask centroid, unit-normalized.

    Returns the zero vector for an empty mask.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if mask is None:
        mask = segment_character(frame)
    if not mask.any():
        return np.zeros(N_RINGS)
    cy, cx = _mask_centroid(frame, mask)
    yy, xx = np.mgrid[0:frame.shape[0], 0:frame.shape[1]]
    ring = np.floor(np.hypot(yy - cy, xx - cx)).astype(int)
    desc = np.zeros(N_RINGS)
    for k in range(N_RINGS):
        sel = mask & (ring == k)
        if sel.any():
            desc[k] = frame[sel].mean()
    norm = np.linalg.norm(desc)
    return desc / norm if norm > 0 else desc


@lru_cache(maxsize=None)
def _reference_feature(character_id: int, height: int, width: int) -> np.ndarray:
    cond = SceneCondition((0.0, 0.0), 0.75, character_id)
    frame = render_frame(((height - 1) / 2.0, (width - 1) / 2.0), cond, height, width)
    feat = character_descriptor(frame)
    feat.setflags(write=False)
    return feat


def reference_feature(character_id: int, height: int = HEIGHT, width: int = WIDTH) -> np.ndarray:
    """Stored identity feature: descriptor of a canonical centred rendering."""
    return _reference_feature(int(character_id), height, width)


def score_character_consistency(video, ref_feature) -> float:
    video = _check_clip(video, 1)
    ref = np.asarray(ref_feature, dtype=np.float64)
    if abs(np.linalg.norm(ref) - 1.0) > 1e-6:
        raise ValueError("reference feature must be unit-normalized")
    total = 0.0
    for frame in video:
        mask = segment_character(frame)
        if mask.any():
            total += _cos_to_unit(character_descriptor(frame, mask), ref)
    return float(total / video.shape[0])


def score_dimensions(video, cond: SceneCondition, initial_frame) -> tuple[float, ...]:
    video = _check_clip(video, 3)
    return (
        score_smoothness(video),
        score_motion(video),
        score_appeal(video),
        score_text_consistency(video, cond),
        score_image_consistency(video, initial_frame),
        score_character_consistency(video, reference_feature(cond.character_id, *video.shape[1:])),
    )


def score_clip(video, cond: SceneCondition, initial_frame, strategy: WeightStrategy = UNIFORM) -> RewardVector:
    return aggregate_reward(score_dimensions(video, cond, initial_frame), strategy)


def reweight(reward: RewardVector, strategy: WeightStrategy) -> RewardVector:
    """Re-aggregate already computed dimension scores under another strategy."""
    return aggregate_reward(reward.scores, strategy)


SCORE_CSV_COLUMNS = ("clip_id",) + DIMENSIONS + ("aggregate", "strategy")


def write_score_csv(path, rows) -> None:
    """``rows``: iterable of (clip_id, RewardVector)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_CSV_COLUMNS)
        for clip_id, rv in rows:
            w.writerow([clip_id] + [repr(float(x)) for x in rv.scores] + [repr(rv.aggregate), rv.strategy])
