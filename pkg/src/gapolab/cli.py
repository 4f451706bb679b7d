"""Command-line entry point: ``gapolab <command> [flags]``.

Commands: gen-data, train, build-pairs, score, eval, ablate. Each command
resolves a run configuration (defaults < ``--config`` JSON < ``--set`` and
explicit flags), writes it into the output directory as ``config.json`` and
logs to ``run.log`` there. Artifacts never contain timestamps.

Exit codes: 0 ok, 2 usage, 3 invalid config, 4 data error, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from . import pairs as pb
from .errors import ConfigError, DataError, FileFormatError, NumericError
from .evaluation import (JUDGES, METHOD_COLUMNS, WEIGHT_COLUMNS, dump_clips, format_table, generate_clips,
                         win_rate, write_plot_data, write_records, write_report_csv)
from .experiment import DEFAULTS, Pipeline, RunConfig, make_scenes
from .rewards import ABLATION_STRATEGIES, WeightStrategy, score_clip, strategy_by_name, write_score_csv
from .scenes import SceneCondition, load_scene_dataset, read_clip, save_scene_dataset
from .trainer import load_checkpoint, save_checkpoint, write_metrics_csv

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4, 5

log = logging.getLogger("gapolab")


class UsageError(Exception):
    pass


# flag name -> config key, for flags that override the run config
CONFIG_FLAGS = {
    "seed": "seed",
    "workers": "workers",
    "steps": "finetune.steps",
    "lr": "finetune.learning_rate",
    "beta": "gapo.beta",
    "alpha": "gapo.alpha",
    "n": "n_candidates",
    "strategy": "strategy",
    "tie_threshold": "tie_threshold",
    "timesteps": "timesteps",
}


def _cfg_help(text: str, key: str) -> str:
    return f"{text} (config key {key}, default: {DEFAULTS[key]})"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="JSON file of flat dotted config keys (default: none)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable (default: none)")
    p.add_argument("--seed", type=int, default=None, help=_cfg_help("master seed", "seed"))
    p.add_argument("--workers", type=int, default=None, help=_cfg_help("parallel scene workers", "workers"))
    p.add_argument("--out", type=Path, default=Path("out"), help="run directory (default: out)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gapolab", description="Gap-aware preference optimization lab")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    _add_common(p)
    p.add_argument("--scenes", type=int, default=None, help="number of scenes (default: config train_scenes or test_scenes)")
    p.add_argument("--split", choices=("train", "test"), default="train", help="seed stream to draw from (default: train)")

    p = sub.add_parser("train", help="pretrain a baseline or fine-tune with sft / dpo / gapo")
    _add_common(p)
    p.add_argument("--mode", choices=("pretrain", "sft", "dpo", "gapo"), required=True, help="training mode (required)")
    p.add_argument("--data", type=Path, default=None,
                   help="scene dataset (pretrain) or pair dataset (fine-tuning); generated from the config when omitted (default: none)")
    p.add_argument("--baseline", type=Path, default=None,
                   help="baseline checkpoint for fine-tuning; pretrained first when omitted (default: none)")
    p.add_argument("--steps", type=int, default=None,
                   help=_cfg_help("training steps; sets pretrain.steps under --mode pretrain", "finetune.steps"))
    p.add_argument("--lr", type=float, default=None,
                   help=_cfg_help("learning rate; sets pretrain.learning_rate under --mode pretrain",
                                  "finetune.learning_rate"))
    p.add_argument("--beta", type=float, default=None, help=_cfg_help("preference temperature", "gapo.beta"))
    p.add_argument("--alpha", type=float, default=None, help=_cfg_help("reward gain base", "gapo.alpha"))

    p = sub.add_parser("build-pairs", help="sample candidates with the baseline and emit preference pairs")
    _add_common(p)
    p.add_argument("--baseline", type=Path, default=None, help="baseline checkpoint; pretrained first when omitted (default: none)")
    p.add_argument("--data", type=Path, default=None, help="scene dataset; the config's train split when omitted (default: none)")
    p.add_argument("--n", type=int, default=None, help=_cfg_help("candidates per scene", "n_candidates"))
    p.add_argument("--strategy", default=None, help=_cfg_help("reward weighting, 'uniform' or a ratio like 3:5:3:3:3:3", "strategy"))

    p = sub.add_parser("score", help="score clips with the reward system and write a CSV")
    _add_common(p)
    p.add_argument("--clips", type=Path, required=True,
                   help="directory holding manifest.json, candidates.json or pairs.json (required)")
    p.add_argument("--strategy", default=None, help=_cfg_help("reward weighting", "strategy"))

    p = sub.add_parser("eval", help="win rate of checkpoint A against checkpoint B")
    _add_common(p)
    p.add_argument("--a", type=Path, required=True, help="checkpoint A (required)")
    p.add_argument("--b", type=Path, required=True, help="checkpoint B (required)")
    p.add_argument("--data", type=Path, default=None, help="test scene dataset; the config's test split when omitted (default: none)")
    p.add_argument("--judge", choices=JUDGES, default="oracle", help="judge (default: oracle)")
    p.add_argument("--tie-threshold", dest="tie_threshold", type=float, default=None,
                   help=_cfg_help("tie band on judge score differences", "tie_threshold"))
    p.add_argument("--dump-clips", action="store_true", help="also write every generated clip (default: off)")

    p = sub.add_parser("ablate", help="method ablation (baseline/sft/dpo/gapo) and optional weighting ablation")
    _add_common(p)
    for m in ("baseline", "sft", "dpo", "gapo"):
        p.add_argument(f"--{m}", type=Path, default=None, help=f"{m} checkpoint; trained from the config when omitted (default: none)")
    p.add_argument("--data", type=Path, default=None, help="test scene dataset; the config's test split when omitted (default: none)")
    p.add_argument("--weights", type=Path, default=None,
                   help="JSON list of weighting strategies to ablate, or 'standard' for the four reference strategies (default: none)")
    p.add_argument("--skip-methods", action="store_true", help="only run the weighting ablation (default: off)")
    p.add_argument("--tie-threshold", dest="tie_threshold", type=float, default=None,
                   help=_cfg_help("tie band on judge score differences", "tie_threshold"))
    return parser


def _parse_override(text: str):
    if "=" not in text:
        raise UsageError(f"--set expects KEY=VALUE, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def resolve_config(args) -> RunConfig:
    overrides = dict(_parse_override(s) for s in args.overrides)
    for flag, key in CONFIG_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            if getattr(args, "mode", None) == "pretrain" and key.startswith("finetune."):
                key = "pretrain." + key.split(".", 1)[1]
            overrides[key] = value
    if args.config is not None:
        return RunConfig.load(args.config, overrides)
    return RunConfig(overrides)


def _prepare_out(args, config: RunConfig) -> Path:
    out = args.out
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(config.to_json())
    except OSError as exc:
        raise DataError(f"cannot write run directory {out}: {exc}") from None
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("gapolab").addHandler(handler)
    logging.getLogger("gapolab").setLevel(logging.INFO)
    log.info("command %s args %s", args.command, {k: str(v) for k, v in sorted(vars(args).items())})
    return out


def _load_scenes(path):
    if path is None:
        return None
    if not Path(path).exists():
        raise DataError(f"dataset not found: {path}")
    try:
        return load_scene_dataset(path)
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"malformed scene dataset {path}: {exc}") from None


def _load_ckpt(path, what: str):
    if not Path(path).exists():
        raise DataError(f"{what} checkpoint not found: {path}")
    return load_checkpoint(path)


def _pipeline(config: RunConfig, baseline_path=None) -> Pipeline:
    baseline = _load_ckpt(baseline_path, "baseline") if baseline_path is not None else None
    return Pipeline(config, baseline)


# -- commands ----------------------------------------------------------------

def cmd_gen_data(args, config: RunConfig) -> int:
    count = args.scenes if args.scenes is not None else config[f"{args.split}_scenes"]
    out = _prepare_out(args, config)
    scenes = make_scenes(config.seed, args.split, count)
    manifest = save_scene_dataset(scenes, out)
    print(manifest)
    return EXIT_OK


def cmd_train(args, config: RunConfig) -> int:
    out = _prepare_out(args, config)
    if args.mode == "pretrain":
        scenes = _load_scenes(args.data)
        pipe = Pipeline(config)
        if scenes is not None:
            pipe._train = scenes
        params = pipe.baseline
        write_metrics_csv(out / "metrics_pretrain.csv", pipe.results["pretrain"].metrics)
        path = out / "baseline.ckpt"
        save_checkpoint(params, path)
        print(path)
        return EXIT_OK

    pipe = _pipeline(config, args.baseline)
    if args.baseline is None:
        save_checkpoint(pipe.baseline, out / "baseline.ckpt")
        write_metrics_csv(out / "metrics_pretrain.csv", pipe.results["pretrain"].metrics)
    if args.data is not None:
        if not Path(args.data).exists():
            raise DataError(f"pair dataset not found: {args.data}")
        try:
            pairs = pb.load_pair_dataset(args.data)
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            raise DataError(f"malformed pair dataset {args.data}: {exc}") from None
    else:
        pairs, _ = pipe.pairs()
    if not pairs:
        raise DataError("no preference pairs to train on")
    from .trainer import train_preference, train_sft

    cfg = config.train_config(args.mode)
    if args.mode == "sft":
        res = train_sft(cfg, pairs, pipe.baseline, pipe.schedule, out if cfg.checkpoint_interval else None)
    else:
        res = train_preference(cfg, pairs, pipe.baseline, pipe.schedule, out if cfg.checkpoint_interval else None)
    write_metrics_csv(out / f"metrics_{args.mode}.csv", res.metrics)
    path = out / f"{args.mode}.ckpt"
    save_checkpoint(res.params, path)
    print(path)
    return EXIT_OK


def cmd_build_pairs(args, config: RunConfig) -> int:
    out = _prepare_out(args, config)
    pipe = _pipeline(config, args.baseline)
    scenes = _load_scenes(args.data)
    if scenes is not None:
        pipe._train = scenes
    if args.baseline is None:
        save_checkpoint(pipe.baseline, out / "baseline.ckpt")
    strategy = config.strategy()
    sets = [c.reweighted(strategy) for c in pipe.candidate_sets]
    pairs, report = pb.pairs_from_sets(sets, config.normalization)
    pb.save_candidate_sets(sets, out)
    manifest = pb.save_pair_dataset(pairs, out, strategy)
    (out / "pair_report.json").write_text(json.dumps(
        {"scenes": report.scenes, "pairs": report.pairs, "degenerate": report.degenerate,
         "degenerate_seeds": report.degenerate_seeds, "strategy": strategy.name}, indent=2) + "\n")
    print(manifest)
    return EXIT_OK


def scoring_records(path) -> list:
    """(clip_id, clip, condition, initial_frame) for every clip listed in a
    scene, candidate, pair or clip-dump manifest under ``path``."""
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"clip directory not found: {root}")
    records = []
    try:
        if (root / "manifest.json").exists():
            for e in json.loads((root / "manifest.json").read_text())["instances"]:
                clip = read_clip(root / e["file"])
                init = read_clip(root / e["initial_frame_file"])[0] if "initial_frame_file" in e else clip[0]
                records.append((e["file"], clip, SceneCondition.from_dict(e["condition"]), init))
        elif (root / "candidates.json").exists():
            for e in json.loads((root / "candidates.json").read_text())["sets"]:
                init = read_clip(root / e["initial_frame_file"])[0]
                cond = SceneCondition.from_dict(e["condition"])
                records += [(f, read_clip(root / f), cond, init) for f in e["files"]]
        elif (root / "pairs.json").exists():
            for e in json.loads((root / "pairs.json").read_text())["pairs"]:
                init = read_clip(root / e["initial_frame_file"])[0]
                cond = SceneCondition.from_dict(e["condition"])
                records += [(e[k], read_clip(root / e[k]), cond, init) for k in ("winner_file", "loser_file")]
        else:
            raise DataError(f"no manifest.json, candidates.json or pairs.json in {root}")
    except (KeyError, ValueError, json.JSONDecodeError, FileNotFoundError) as exc:
        raise DataError(f"malformed clip manifest in {root}: {exc}") from None
    return records


def cmd_score(args, config: RunConfig) -> int:
    records = scoring_records(args.clips)
    out = _prepare_out(args, config)
    strategy = config.strategy()
    rows = [(cid, score_clip(clip, cond, init, strategy)) for cid, clip, cond, init in records]
    path = out / "scores.csv"
    write_score_csv(path, rows)
    print(path)
    return EXIT_OK


def _testset(args, config: RunConfig):
    scenes = _load_scenes(args.data)
    return scenes if scenes is not None else make_scenes(config.seed, "test", config.test_scenes)


def cmd_eval(args, config: RunConfig) -> int:
    a = _load_ckpt(args.a, "A")
    b = _load_ckpt(args.b, "B")
    out = _prepare_out(args, config)
    testset = _testset(args, config)
    schedule = config.schedule()
    report = win_rate(a, b, testset, schedule, args.judge, config.tie_threshold, config.seed, config.workers)
    write_report_csv(out / "winrate.csv", report)
    write_records(out / "verdicts.jsonl", report)
    write_plot_data(out / "winrate_plot.csv", {"a_vs_b": report})
    if args.dump_clips:
        for name, model in (("a", a), ("b", b)):
            dump_clips(out / f"clips_{name}", generate_clips(model, testset, schedule, config.seed, config.workers),
                       testset)
    print(f"win {report.win_rate:.4f} tie {report.tie_rate:.4f} loss {report.loss_rate:.4f}")
    return EXIT_OK


def load_strategies(path) -> list[WeightStrategy]:
    if str(path) == "standard":
        return list(ABLATION_STRATEGIES)
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"weights file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"weights file {path} is not valid JSON: {exc}") from None
    if isinstance(doc, dict):
        doc = doc.get("strategies")
    if not isinstance(doc, list) or not doc:
        raise ConfigError("weights file must hold a non-empty list of strategies")
    try:
        return [strategy_by_name(s) if isinstance(s, str) else WeightStrategy(":".join(map(str, s)), tuple(s))
                for s in doc]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad strategy in {path}: {exc}") from None


def cmd_ablate(args, config: RunConfig) -> int:
    strategies = load_strategies(args.weights) if args.weights is not None else None
    if args.skip_methods and strategies is None:
        raise UsageError("--skip-methods needs --weights")
    paths = {m: getattr(args, m) for m in ("baseline", "sft", "dpo", "gapo")}
    for m, p in paths.items():
        if p is not None and not Path(p).exists():
            raise DataError(f"checkpoint for method {m!r} not found: {p}")
    out = _prepare_out(args, config)
    pipe = _pipeline(config, paths["baseline"])
    scenes = _load_scenes(args.data)
    if scenes is not None:
        pipe._test = scenes
    if not args.skip_methods:
        models = {m: (load_checkpoint(p) if p is not None else pipe.train_method(m)) for m, p in paths.items()}
        for m, p in paths.items():
            if p is None:
                save_checkpoint(models[m], out / f"{m}.ckpt")
        from .evaluation import run_method_ablation

        rows, _, _ = run_method_ablation(models, pipe.test_scenes, pipe.schedule, config.seed, config.tie_threshold,
                                         config.workers, out)
        print(format_table(rows, METHOD_COLUMNS), end="")
    if strategies is not None:
        rows = pipe.weight_ablation(strategies, out)
        print(format_table(rows, WEIGHT_COLUMNS), end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "build-pairs": cmd_build_pairs,
    "score": cmd_score,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "scenes", None) is not None and args.scenes < 1:
            raise UsageError("--scenes must be >= 1")
        if args.workers is not None and args.workers < 1:
            raise UsageError("--workers must be >= 1")
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"gapolab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"gapolab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileFormatError) as exc:
        code = getattr(exc, "code", None)
        suffix = f" (file error {code})" if code is not None else ""
        print(f"gapolab: data error: {exc}{suffix}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"gapolab: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    finally:
        for h in list(logging.getLogger("gapolab").handlers):
            if isinstance(h, logging.FileHandler):
                logging.getLogger("gapolab").removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
