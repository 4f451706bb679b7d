"""Run configuration and the end-to-end experiment pipeline.

A run is fixed by one flat dictionary of dotted keys (``"finetune.steps"``,
``"gapo.beta"``, ...). Every random draw descends from the single ``seed``
through named streams, so the same config reproduces the same numbers.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

from . import pairs as pb
from .diffusion import build_schedule
from .errors import ConfigError
from .evaluation import compare_models, run_method_ablation, run_weight_ablation
from .losses import GapoConfig
from .rewards import UNIFORM, WeightStrategy, strategy_by_name
from .rng import derive_seed
from .scenes import generate_scene
from .trainer import TrainConfig, pretrain, train_preference, train_sft

log = logging.getLogger(__name__)

DEFAULTS = {
    "seed": 0,
    "train_scenes": 200,
    "test_scenes": 100,
    "n_candidates": 4,
    "timesteps": 64,
    "schedule": "cosine",
    "strategy": "uniform",
    "normalization": "identity",
    "tie_threshold": 0.01,
    "workers": 1,
    "pretrain.steps": 3000,
    "pretrain.batch_size": 8,
    "pretrain.learning_rate": 1e-3,
    "pretrain.optimizer": "adam",
    "pretrain.checkpoint_interval": 0,
    "pretrain.max_grad_norm": None,
    "finetune.steps": 600,
    "finetune.batch_size": 8,
    "finetune.learning_rate": 2e-4,
    "finetune.optimizer": "adam",
    "finetune.checkpoint_interval": 0,
    "finetune.max_grad_norm": None,
    "gapo.beta": 500.0,
    "gapo.alpha": 2.0,
    "gapo.omega_mode": "inv_one_plus_snr",
    "gapo.timestep_rule": "uniform_shared",
    "gapo.noise_rule": "shared",
}

_FLOAT_OR_NONE = {"pretrain.max_grad_norm", "finetune.max_grad_norm"}


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if key in _FLOAT_OR_NONE:
        if value is None:
            return None
        default = 0.0
    if isinstance(default, bool) or isinstance(value, bool):
        raise ConfigError(f"{key}: booleans are not accepted")
    if isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if isinstance(value, str):
            try:
                value = int(value)
            except ValueError:
                raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
        if not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


class RunConfig:
    """Validated flat run configuration. Unknown keys are rejected."""

    def __init__(self, values: dict | None = None):
        merged = dict(DEFAULTS)
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, value)
        self._values = merged
        self._validate()

    def _validate(self) -> None:
        v = self._values
        if v["seed"] < 0:
            raise ConfigError("seed must be non-negative")
        for key in ("train_scenes", "test_scenes", "workers"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1")
        if v["n_candidates"] < 2:
            raise ConfigError("n_candidates must be >= 2")
        if v["timesteps"] < 4:
            raise ConfigError("timesteps must be >= 4")
        if v["schedule"] not in ("cosine", "linear"):
            raise ConfigError(f"unknown schedule {v['schedule']!r}")
        if v["normalization"] not in ("identity", "minmax"):
            raise ConfigError(f"unknown normalization {v['normalization']!r}")
        if not v["tie_threshold"] >= 0:
            raise ConfigError("tie_threshold must be >= 0")
        try:
            self.strategy()
            self.gapo_config()
            self.train_config("pretrain")
            self.train_config("gapo")
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def __getitem__(self, key: str):
        return self._values[key]

    def __getattr__(self, name: str):
        values = self.__dict__.get("_values")
        if values is not None and name in values:
            return values[name]
        raise AttributeError(name)

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values

    def to_dict(self) -> dict:
        return dict(self._values)

    def to_json(self) -> str:
        return json.dumps(self._values, indent=2, sort_keys=True) + "\n"

    def with_overrides(self, overrides: dict) -> "RunConfig":
        merged = dict(self._values)
        merged.update(overrides)
        return RunConfig(merged)

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object of dotted keys")
        doc.update(overrides or {})
        return cls(doc)

    def strategy(self) -> WeightStrategy:
        return strategy_by_name(self["strategy"])

    def gapo_config(self) -> GapoConfig:
        return GapoConfig(beta=self["gapo.beta"], alpha=self["gapo.alpha"], omega_mode=self["gapo.omega_mode"],
                          timestep_rule=self["gapo.timestep_rule"], noise_rule=self["gapo.noise_rule"])

    def train_config(self, mode: str) -> TrainConfig:
        section = "pretrain" if mode == "pretrain" else "finetune"
        return TrainConfig(
            mode=mode,
            steps=self[f"{section}.steps"],
            batch_size=self[f"{section}.batch_size"],
            learning_rate=self[f"{section}.learning_rate"],
            gapo=self.gapo_config(),
            seed=self["seed"],
            checkpoint_interval=self[f"{section}.checkpoint_interval"],
            optimizer=self[f"{section}.optimizer"],
            max_grad_norm=self[f"{section}.max_grad_norm"],
        )

    def schedule(self):
        return build_schedule(self["timesteps"], self["schedule"])


def scene_seeds(seed: int, split: str, count: int) -> list[int]:
    """Per-scene seeds for a named split; splits never share a stream."""
    return [derive_seed(seed, "scenes", split, i) for i in range(count)]


def make_scenes(seed: int, split: str, count: int) -> list:
    return [generate_scene(s) for s in scene_seeds(seed, split, count)]


class Pipeline:
    """Lazily pretrains the baseline, samples candidate sets once, and trains
    each fine-tuning method on demand. Trained models are cached by
    (mode, strategy) so ablations share work."""

    def __init__(self, config: RunConfig | None = None, baseline=None):
        self.config = config or RunConfig()
        self.schedule = self.config.schedule()
        self._baseline = baseline
        self._train = None
        self._test = None
        self._sets = None
        self._models = {}
        self.results = {}

    @property
    def train_scenes(self) -> list:
        if self._train is None:
            self._train = make_scenes(self.config.seed, "train", self.config.train_scenes)
        return self._train

    @property
    def test_scenes(self) -> list:
        if self._test is None:
            self._test = make_scenes(self.config.seed, "test", self.config.test_scenes)
        return self._test

    @property
    def baseline(self):
        if self._baseline is None:
            log.info("pretraining baseline on %d scenes", len(self.train_scenes))
            res = pretrain(self.config.train_config("pretrain"), self.train_scenes, self.schedule)
            self.results["pretrain"] = res
            self._baseline = res.params
        return self._baseline

    @property
    def candidate_sets(self) -> list:
        if self._sets is None:
            log.info("sampling %d candidates for %d scenes", self.config.n_candidates, len(self.train_scenes))
            self._sets = pb.build_candidate_sets(self.baseline, self.train_scenes, self.config.n_candidates,
                                                 self.config.seed, self.schedule, UNIFORM, self.config.workers)
        return self._sets

    def pairs(self, strategy: WeightStrategy | None = None):
        strategy = strategy or self.config.strategy()
        sets = [c.reweighted(strategy) for c in self.candidate_sets]
        return pb.pairs_from_sets(sets, self.config.normalization)

    def train_method(self, mode: str, strategy: WeightStrategy | None = None):
        if mode == "baseline":
            return self.baseline
        strategy = strategy or self.config.strategy()
        key = (mode, strategy.weights)
        if key not in self._models:
            pairs, report = self.pairs(strategy)
            cfg = self.config.train_config(mode)
            log.info("training %s on %d pairs (strategy %s)", mode, len(pairs), strategy.name)
            if mode == "sft":
                res = train_sft(cfg, pairs, self.baseline, self.schedule)
            else:
                res = train_preference(cfg, pairs, self.baseline, self.schedule)
            self.results[key] = res
            self._models[key] = (res.params, len(pairs))
        return self._models[key][0]

    def train_gapo(self, strategy: WeightStrategy):
        params = self.train_method("gapo", strategy)
        return params, self._models[("gapo", strategy.weights)][1]

    def models(self) -> dict:
        return {m: self.train_method(m) for m in ("baseline", "sft", "dpo", "gapo")}

    def win_rate_vs_baseline(self, mode: str = "gapo"):
        rows, reports, _ = compare_models({"baseline": self.baseline, mode: self.train_method(mode)},
                                          self.test_scenes, self.schedule, "baseline", self.config.seed,
                                          self.config.tie_threshold, self.config.workers)
        return reports[mode], rows

    def method_ablation(self, out_dir=None):
        return run_method_ablation(self.models(), self.test_scenes, self.schedule, self.config.seed,
                                   self.config.tie_threshold, self.config.workers, out_dir)

    def weight_ablation(self, strategies, out_dir=None):
        return run_weight_ablation(strategies, self, self.test_scenes, out_dir)

