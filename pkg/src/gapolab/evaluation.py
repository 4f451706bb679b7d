"""Judged win rates between checkpoints and the method / weighting ablations.

Both models in a comparison sample each test scene with the same seed, so
identical models always tie.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffusion import sample
from .rewards import UNIFORM, WeightStrategy, score_clip
from .rng import derive_seed
from .scenes import oracle_reward, quantize

JUDGES = ("oracle", "reward_system")
DEFAULT_TIE_THRESHOLD = 0.01


@dataclass
class WinRateReport:
    wins: int
    ties: int
    losses: int
    judge: str
    tie_threshold: float
    records: list = field(default_factory=list, repr=False)

    @property
    def total(self) -> int:
        return self.wins + self.ties + self.losses

    @property
    def win_rate(self) -> float:
        return self.wins / self.total

    @property
    def tie_rate(self) -> float:
        return self.ties / self.total

    @property
    def loss_rate(self) -> float:
        return self.losses / self.total

    def to_dict(self) -> dict:
        return {
            "wins": self.wins, "ties": self.ties, "losses": self.losses,
            "win_rate": self.win_rate, "tie_rate": self.tie_rate, "loss_rate": self.loss_rate,
            "judge": self.judge, "tie_threshold": self.tie_threshold,
        }


def verdict(score_a: float, score_b: float, tie_threshold: float) -> str:
    delta = score_a - score_b
    if delta > tie_threshold:
        return "win"
    if delta < -tie_threshold:
        return "loss"
    return "tie"


def tally(scores_a, scores_b, tie_threshold: float = DEFAULT_TIE_THRESHOLD, judge: str = "oracle",
          scene_seeds=None) -> WinRateReport:
    scores_a, scores_b = list(scores_a), list(scores_b)
    if not scores_a or len(scores_a) != len(scores_b):
        raise ValueError("need two equally long, non-empty score lists")
    seeds = list(scene_seeds) if scene_seeds is not None else list(range(len(scores_a)))
    counts = {"win": 0, "tie": 0, "loss": 0}
    records = []
    for seed, a, b in zip(seeds, scores_a, scores_b):
        v = verdict(a, b, tie_threshold)
        counts[v] += 1
        records.append({"scene_seed": seed, "score_a": float(a), "score_b": float(b), "verdict": v})
    return WinRateReport(counts["win"], counts["tie"], counts["loss"], judge, tie_threshold, records)


def eval_seed(seed: int, scene) -> int:
    return derive_seed(seed, "eval", scene.seed)


def _generate_job(args):
    model, scene, schedule, seed = args
    return quantize(sample(model, schedule, scene.condition, scene.initial_frame, eval_seed(seed, scene)))


def generate_clips(model, testset, schedule, seed: int = 0, workers: int = 1) -> list:
    jobs = [(model, s, schedule, seed) for s in testset]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_generate_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [_generate_job(j) for j in jobs]


def judge_clips(clips, testset, judge: str = "oracle", strategy: WeightStrategy = UNIFORM) -> np.ndarray:
    if judge == "oracle":
        return np.array([oracle_reward(c, s) for c, s in zip(clips, testset)])
    if judge == "reward_system":
        return np.array([score_clip(c, s.condition, s.initial_frame, strategy).aggregate for c, s in zip(clips, testset)])
    raise ValueError(f"unknown judge {judge!r}")


def win_rate(model_a, model_b, testset, schedule, judge: str = "oracle",
             tie_threshold: float = DEFAULT_TIE_THRESHOLD, seed: int = 0, workers: int = 1) -> WinRateReport:
    """Per scene, sample one clip from each model with a shared seed and judge both."""
    testset = list(testset)
    if not testset:
        raise ValueError("empty test set")
    sa = judge_clips(generate_clips(model_a, testset, schedule, seed, workers), testset, judge)
    sb = judge_clips(generate_clips(model_b, testset, schedule, seed, workers), testset, judge)
    return tally(sa, sb, tie_threshold, judge, [s.seed for s in testset])


# -- ablation tables ---------------------------------------------------------

METHODS = ("baseline", "sft", "dpo", "gapo")
METHOD_COLUMNS = ("method", "mean_oracle", "mean_aggregate", "wins", "ties", "losses",
                  "win_rate", "tie_rate", "loss_rate")


def compare_models(models: dict, testset, schedule, reference: str = "baseline", seed: int = 0,
                   tie_threshold: float = DEFAULT_TIE_THRESHOLD, workers: int = 1, label: str = "method"):
    """One row per model: mean oracle score, mean reward aggregate and oracle-judged
    win/tie/loss counts against ``models[reference]``. Also returns the clips."""
    testset = list(testset)
    clips = {name: generate_clips(m, testset, schedule, seed, workers) for name, m in models.items()}
    oracle = {name: judge_clips(c, testset, "oracle") for name, c in clips.items()}
    aggregate = {name: judge_clips(c, testset, "reward_system") for name, c in clips.items()}
    seeds = [s.seed for s in testset]
    rows, reports = [], {}
    for name in models:
        rep = tally(oracle[name], oracle[reference], tie_threshold, "oracle", seeds)
        reports[name] = rep
        rows.append({
            label: name,
            "mean_oracle": float(np.mean(oracle[name])),
            "mean_aggregate": float(np.mean(aggregate[name])),
            "wins": rep.wins, "ties": rep.ties, "losses": rep.losses,
            "win_rate": rep.win_rate, "tie_rate": rep.tie_rate, "loss_rate": rep.loss_rate,
        })
    return rows, reports, clips


def run_method_ablation(models: dict, testset, schedule, seed: int = 0,
                        tie_threshold: float = DEFAULT_TIE_THRESHOLD, workers: int = 1, out_dir=None):
    """``models`` maps each of baseline/sft/dpo/gapo to parameters or a checkpoint path."""
    from .trainer import load_checkpoint

    loaded = {}
    for name in METHODS:
        if name not in models:
            raise KeyError(f"missing checkpoint for method {name!r}")
        m = models[name]
        if isinstance(m, (str, Path)):
            if not Path(m).exists():
                raise FileNotFoundError(f"checkpoint for method {name!r} not found: {m}")
            m = load_checkpoint(m)
        loaded[name] = m
    rows, reports, clips = compare_models(loaded, testset, schedule, "baseline", seed, tie_threshold, workers)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_table(out / "method_ablation.csv", rows, METHOD_COLUMNS)
        (out / "method_ablation.txt").write_text(format_table(rows, METHOD_COLUMNS))
        write_plot_data(out / "method_winrates.csv", reports)
        for name, rep in reports.items():
            write_records(out / f"verdicts_{name}.jsonl", rep)
    return rows, reports, clips


WEIGHT_COLUMNS = ("strategy", "weights", "pairs", "mean_oracle", "mean_aggregate", "wins", "ties", "losses",
                  "win_rate", "tie_rate", "loss_rate")


def run_weight_ablation(strategies, pipeline, testset, out_dir=None):
    """For each strategy, rebuild preference pairs, retrain GAPO and evaluate it
    against the pipeline's baseline.

    ``pipeline`` needs ``baseline``, ``schedule``, ``config`` (with ``seed``,
    ``tie_threshold``, ``workers``) and ``train_gapo(strategy) -> (params, n_pairs)``.
    """
    strategies = list(strategies)
    if not strategies:
        raise ValueError("no strategies")
    cfg = pipeline.config
    models, n_pairs = {"baseline": pipeline.baseline}, {}
    for st in strategies:
        models[st.name], n_pairs[st.name] = pipeline.train_gapo(st)
    rows, reports, _ = compare_models(models, testset, pipeline.schedule, "baseline", cfg.seed,
                                      cfg.tie_threshold, cfg.workers, label="strategy")
    out_rows = []
    for st in strategies:
        row = next(r for r in rows if r["strategy"] == st.name)
        row = {"strategy": st.name, "weights": ":".join(f"{w:.6g}" for w in st.weights), "pairs": n_pairs[st.name],
               **{k: v for k, v in row.items() if k != "strategy"}}
        out_rows.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_table(out / "weight_ablation.csv", out_rows, WEIGHT_COLUMNS)
        (out / "weight_ablation.txt").write_text(format_table(out_rows, WEIGHT_COLUMNS))
    return out_rows


# -- output formats ----------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_table(path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def format_table(rows, columns) -> str:
    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    body = [[cell(r[c]) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def write_plot_data(path, reports: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("method", "win", "tie", "loss"))
        for name, rep in reports.items():
            w.writerow((name, repr(rep.win_rate), repr(rep.tie_rate), repr(rep.loss_rate)))


def write_records(path, report: WinRateReport) -> None:
    with open(path, "w") as fh:
        for rec in report.records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_report_csv(path, report: WinRateReport) -> None:
    d = report.to_dict()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(d))
        w.writerow([_fmt(v) for v in d.values()])


def dump_clips(out_dir, clips, testset) -> Path:
    """Write generated clips in the scene-dataset layout (plus each scene's
    initial frame) so they can be rescored offline."""
    from .scenes import write_clip

    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (clip, scene) in enumerate(zip(clips, testset)):
        name = f"clips/gen_{i:05d}_{scene.seed}.gvid"
        init = f"clips/init_{i:05d}_{scene.seed}.gvid"
        write_clip(out / name, clip)
        write_clip(out / init, np.asarray(scene.initial_frame)[None])
        entries.append({"seed": scene.seed, "condition": scene.condition.to_dict(), "start": list(scene.start),
                        "file": name, "initial_frame_file": init})
    path = out / "manifest.json"
    path.write_text(json.dumps({"version": 1, "instances": entries}, indent=2) + "\n")
    return path
