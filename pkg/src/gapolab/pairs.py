"""Best/worst-of-N preference pairs sampled from a frozen reference model."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import sample
from .losses import PreferencePair
from .rewards import UNIFORM, RewardVector, WeightStrategy, aggregate_reward, reweight, score_clip
from .rng import derive_seed
from .scenes import SceneCondition, SceneInstance, quantize, read_clip, write_clip

NORMALIZATIONS = ("identity", "minmax")


@dataclass(eq=False)
class CandidateSet:
    scene: SceneInstance
    clips: list
    rewards: list
    seeds: list

    def __post_init__(self):
        n = len(self.clips)
        if n < 2 or len(self.rewards) != n or len(self.seeds) != n:
            raise ValueError("candidate set needs N >= 2 clips with one reward and seed each")
        if len(set(self.seeds)) != n:
            raise ValueError("candidate seeds must be pairwise distinct")

    @property
    def aggregates(self) -> np.ndarray:
        return np.array([r.aggregate for r in self.rewards])

    def reweighted(self, strategy: WeightStrategy) -> "CandidateSet":
        return CandidateSet(self.scene, self.clips, [reweight(r, strategy) for r in self.rewards], self.seeds)


@dataclass
class DatasetReport:
    scenes: int = 0
    pairs: int = 0
    degenerate: int = 0
    degenerate_seeds: list = field(default_factory=list)


def candidate_base_seed(base_seed: int, scene: SceneInstance) -> int:
    return derive_seed(base_seed, "candidates", scene.seed) % (2**62)


def build_candidates(reference, scene: SceneInstance, n: int, base_seed: int, schedule,
                     strategy: WeightStrategy = UNIFORM) -> CandidateSet:
    """Sample ``n`` clips with seeds base_seed .. base_seed + n - 1 and score each.

    Clips are rounded to the on-disk float32 precision so that a persisted
    dataset trains exactly like the in-memory one.
    """
    if n < 2:
        raise ValueError(f"need N >= 2 candidates, got {n}")
    seeds = [base_seed + i for i in range(n)]
    clips = [quantize(sample(reference, schedule, scene.condition, scene.initial_frame, s)) for s in seeds]
    rewards = [score_clip(c, scene.condition, scene.initial_frame, strategy) for c in clips]
    return CandidateSet(scene, clips, rewards, seeds)


def normalized_rewards(aggregates, mode: str = "identity") -> np.ndarray:
    a = np.asarray(aggregates, dtype=np.float64)
    if mode == "identity":
        return a
    if mode == "minmax":
        span = a.max() - a.min()
        return (a - a.min()) / span if span > 0 else np.zeros_like(a)
    raise ValueError(f"unknown normalization {mode!r}")


def select_indices(aggregates) -> tuple[int, int]:
    """argmax / argmin with ties broken toward the lowest index."""
    a = np.asarray(aggregates)
    return int(np.argmax(a)), int(np.argmin(a))


def select_pair(cset: CandidateSet, normalization: str = "identity") -> PreferencePair | None:
    """Winner = highest aggregate, loser = lowest. Returns None when every
    aggregate is tied (a degenerate set with no usable preference)."""
    agg = cset.aggregates
    wi, li = select_indices(agg)
    if agg[wi] == agg[li]:
        return None
    norm = normalized_rewards(agg, normalization)
    return PreferencePair(
        initial_frame=cset.scene.initial_frame,
        condition=cset.scene.condition,
        winner=cset.clips[wi],
        loser=cset.clips[li],
        winner_reward=float(norm[wi]),
        loser_reward=float(norm[li]),
        scene_seed=cset.scene.seed,
    )


def _candidates_job(args):
    reference, scene, n, base_seed, schedule, strategy = args
    return build_candidates(reference, scene, n, candidate_base_seed(base_seed, scene), schedule, strategy)


def build_candidate_sets(reference, scenes, n: int, base_seed: int, schedule,
                         strategy: WeightStrategy = UNIFORM, workers: int = 1) -> list[CandidateSet]:
    jobs = [(reference, s, n, base_seed, schedule, strategy) for s in scenes]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_candidates_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [_candidates_job(j) for j in jobs]


def pairs_from_sets(sets, normalization: str = "identity") -> tuple[list[PreferencePair], DatasetReport]:
    report = DatasetReport(scenes=len(sets))
    pairs = []
    for cset in sets:
        pair = select_pair(cset, normalization)
        if pair is None:
            report.degenerate += 1
            report.degenerate_seeds.append(cset.scene.seed)
        else:
            pairs.append(pair)
    report.pairs = len(pairs)
    return pairs, report


def build_dataset(reference, scenes, n: int, base_seed: int, schedule, strategy: WeightStrategy = UNIFORM,
                  normalization: str = "identity", workers: int = 1):
    if not scenes:
        raise ValueError("no scenes")
    sets = build_candidate_sets(reference, scenes, n, base_seed, schedule, strategy, workers)
    return pairs_from_sets(sets, normalization)


# -- persistence -------------------------------------------------------------

def _reward_to_dict(r: RewardVector) -> dict:
    return {"scores": list(r.scores), "weights": list(r.weights), "aggregate": r.aggregate, "strategy": r.strategy}


def save_candidate_sets(sets, out_dir) -> Path:
    out = Path(out_dir)
    (out / "candidates").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, cset in enumerate(sets):
        scene = cset.scene
        init_name = f"candidates/s{i:05d}_init.gvid"
        write_clip(out / init_name, scene.initial_frame[None])
        gt_name = f"candidates/s{i:05d}_gt.gvid"
        write_clip(out / gt_name, scene.gt_video)
        files = []
        for j, clip in enumerate(cset.clips):
            name = f"candidates/s{i:05d}_c{j}.gvid"
            write_clip(out / name, clip)
            files.append(name)
        entries.append({
            "scene_seed": scene.seed,
            "condition": scene.condition.to_dict(),
            "start": list(scene.start),
            "initial_frame_file": init_name,
            "gt_file": gt_name,
            "seeds": list(cset.seeds),
            "files": files,
            "rewards": [_reward_to_dict(r) for r in cset.rewards],
        })
    path = out / "candidates.json"
    path.write_text(json.dumps({"version": 1, "sets": entries}, indent=2) + "\n")
    return path


def load_candidate_sets(path) -> list[CandidateSet]:
    path = Path(path)
    manifest = path / "candidates.json" if path.is_dir() else path
    root = manifest.parent
    sets = []
    for e in json.loads(manifest.read_text())["sets"]:
        gt = read_clip(root / e["gt_file"])
        scene = SceneInstance(
            initial_frame=read_clip(root / e["initial_frame_file"])[0],
            condition=SceneCondition.from_dict(e["condition"]),
            gt_video=gt,
            seed=int(e["scene_seed"]),
            start=tuple(e["start"]),
        )
        rewards = [aggregate_reward(r["scores"], WeightStrategy(r["strategy"], tuple(r["weights"]))) for r in e["rewards"]]
        clips = [read_clip(root / f) for f in e["files"]]
        sets.append(CandidateSet(scene, clips, rewards, [int(s) for s in e["seeds"]]))
    return sets


def save_pair_dataset(pairs, out_dir, strategy: WeightStrategy = UNIFORM) -> Path:
    out = Path(out_dir)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, pair in enumerate(pairs):
        stem = f"pairs/p{i:05d}"
        write_clip(out / f"{stem}_w.gvid", pair.winner)
        write_clip(out / f"{stem}_l.gvid", pair.loser)
        write_clip(out / f"{stem}_init.gvid", np.asarray(pair.initial_frame)[None])
        entries.append({
            "scene_seed": pair.scene_seed,
            "winner_file": f"{stem}_w.gvid",
            "loser_file": f"{stem}_l.gvid",
            "initial_frame_file": f"{stem}_init.gvid",
            "condition": pair.condition.to_dict(),
            "winner_reward": pair.winner_reward,
            "loser_reward": pair.loser_reward,
            "strategy": strategy.name,
        })
    path = out / "pairs.json"
    path.write_text(json.dumps({"version": 1, "pairs": entries}, indent=2) + "\n")
    return path


def load_pair_dataset(path) -> list[PreferencePair]:
    path = Path(path)
    manifest = path / "pairs.json" if path.is_dir() else path
    root = manifest.parent
    pairs = []
    for e in json.loads(manifest.read_text())["pairs"]:
        pairs.append(PreferencePair(
            initial_frame=read_clip(root / e["initial_frame_file"])[0],
            condition=SceneCondition.from_dict(e["condition"]),
            winner=read_clip(root / e["winner_file"]),
            loser=read_clip(root / e["loser_file"]),
            winner_reward=float(e["winner_reward"]),
            loser_reward=float(e["loser_reward"]),
            scene_seed=e.get("scene_seed"),
        ))
    return pairs
