import csv
import struct
from dataclasses import replace

import numpy as np
import pytest

from conftest import make_pair, random_params
from gapolab import denoiser as net
from gapolab.errors import ChecksumError, MagicError, NumericError, TruncatedError, VersionError
from gapolab.losses import GapoConfig, PreferencePair
from gapolab.trainer import (
    METRIC_COLUMNS, TrainConfig, default_config, load_checkpoint, pretrain, save_checkpoint, train, train_preference,
    train_sft, write_metrics_csv,
)


@pytest.fixture(scope="module")
def baseline(small_layout, small_scenes, small_schedule):
    cfg = TrainConfig(mode="pretrain", steps=150, learning_rate=3e-3, seed=0)
    return pretrain(cfg, small_scenes, small_schedule, net.init_params(small_layout, 0)).params


@pytest.fixture(scope="module")
def pairs(small_scenes):
    rng = np.random.default_rng(11)
    return [make_pair(s, rng) for s in small_scenes]


def pref_config(mode, steps=10, **gapo):
    return TrainConfig(mode=mode, steps=steps, batch_size=4, learning_rate=1e-3, seed=3,
                       gapo=GapoConfig(beta=5.0, **gapo))


def test_config_validation_and_defaults():
    with pytest.raises(ValueError):
        TrainConfig(mode="rl")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
    assert default_config("pretrain").steps == 3000 and default_config("pretrain").learning_rate == 1e-3
    g = default_config("gapo")
    assert (g.steps, g.learning_rate, g.batch_size, g.gapo.beta, g.gapo.alpha) == (600, 2e-4, 8, 500.0, 2.0)


def test_zero_steps_returns_init(small_layout, small_scenes, small_schedule, baseline, pairs):
    init = net.init_params(small_layout, 4)
    res = pretrain(TrainConfig(steps=0), small_scenes, small_schedule, init)
    assert np.array_equal(res.params.vector, init.vector) and res.metrics == []
    assert res.params is not init
    for mode in ("sft", "dpo", "gapo"):
        out = train(TrainConfig(mode=mode, steps=0), pairs, baseline, small_schedule).params
        assert np.array_equal(out.vector, baseline.vector)


def test_pretraining_lowers_loss(small_layout, small_scenes, small_schedule):
    res = pretrain(TrainConfig(steps=300, learning_rate=3e-3), small_scenes, small_schedule,
                   net.init_params(small_layout, 0))
    losses = [m["loss"] for m in res.metrics]
    assert np.mean(losses[-30:]) < np.mean(losses[:30])


def test_pretrain_determinism(small_layout, small_scenes, small_schedule, tmp_path):
    cfg = TrainConfig(steps=20, learning_rate=3e-3, seed=9)
    a = pretrain(cfg, small_scenes, small_schedule, net.init_params(small_layout, 0))
    b = pretrain(cfg, small_scenes, small_schedule, net.init_params(small_layout, 0))
    save_checkpoint(a.params, tmp_path / "a.ckpt")
    save_checkpoint(b.params, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert [m["loss"] for m in a.metrics] == [m["loss"] for m in b.metrics]
    c = pretrain(replace(cfg, seed=10), small_scenes, small_schedule, net.init_params(small_layout, 0))
    assert not np.array_equal(a.params.vector, c.params.vector)


def test_pretrain_rejects_empty_and_divergence(small_layout, small_scenes, small_schedule):
    with pytest.raises(ValueError):
        pretrain(TrainConfig(steps=1), [], small_schedule)
    bad = net.DenoiserParams(np.full(small_layout.param_count, 1e200), small_layout)
    with pytest.raises(NumericError, match="step 1"), np.errstate(all="ignore"):
        pretrain(TrainConfig(steps=3), small_scenes, small_schedule, bad)


class Tracked(PreferencePair):
    """A pair that counts reads of its loser clip."""
    reads = 0

    def __getattribute__(self, name):
        if name == "loser":
            type(self).reads += 1
        return super().__getattribute__(name)


def test_sft_never_reads_losers(pairs, baseline, small_schedule):
    tracked = [Tracked(p.initial_frame, p.condition, p.winner, p.loser, p.winner_reward, p.loser_reward)
               for p in pairs]
    Tracked.reads = 0
    train_sft(TrainConfig(mode="sft", steps=5, learning_rate=1e-4), tracked, baseline, small_schedule)
    assert Tracked.reads == 0


def test_sft_on_training_clips_stays_near_floor(small_scenes, small_schedule, baseline):
    same = [PreferencePair(s.initial_frame, s.condition, s.gt_video, s.gt_video, 0.9, 0.1) for s in small_scenes]
    cfg = TrainConfig(mode="sft", steps=30, learning_rate=1e-4, seed=1)
    sft = train_sft(cfg, same, baseline, small_schedule)
    pre = pretrain(replace(cfg, mode="sft"), small_scenes, small_schedule, baseline)
    a = np.mean([m["loss"] for m in sft.metrics])
    b = np.mean([m["loss"] for m in pre.metrics])
    assert a == pytest.approx(b, rel=1e-12)


def test_sft_determinism(pairs, baseline, small_schedule):
    cfg = TrainConfig(mode="sft", steps=8, learning_rate=1e-4, seed=2)
    a = train_sft(cfg, pairs, baseline, small_schedule).params
    b = train_sft(cfg, pairs, baseline, small_schedule).params
    assert a.vector.tobytes() == b.vector.tobytes()


def test_preference_freezes_reference(pairs, baseline, small_schedule):
    before = baseline.vector.copy()
    res = train_preference(pref_config("gapo"), pairs, baseline, small_schedule)
    assert baseline.vector.tobytes() == before.tobytes()
    assert not np.array_equal(res.params.vector, before)


def test_preference_requires_mode(pairs, baseline, small_schedule):
    with pytest.raises(ValueError):
        train_preference(TrainConfig(mode="sft", steps=1), pairs, baseline, small_schedule)
    with pytest.raises(ValueError):
        train_preference(pref_config("dpo"), [], baseline, small_schedule)


def test_unit_gap_gapo_matches_dpo(pairs, baseline, small_schedule):
    extreme = [PreferencePair(p.initial_frame, p.condition, p.winner, p.loser, 1.0, 0.0) for p in pairs]
    g = train_preference(pref_config("gapo"), extreme, baseline, small_schedule)
    d = train_preference(pref_config("dpo"), extreme, baseline, small_schedule)
    assert g.params.vector.tobytes() == d.params.vector.tobytes()
    assert [m["loss"] for m in g.metrics] == [m["loss"] for m in d.metrics]
    forced = train_preference(pref_config("gapo"), pairs, baseline, small_schedule, gap_override=1.0)
    plain = train_preference(pref_config("dpo"), pairs, baseline, small_schedule)
    assert forced.params.vector.tobytes() == plain.params.vector.tobytes()


def test_gap_limit_alpha_to_one(pairs, baseline, small_schedule):
    g = train_preference(pref_config("gapo", steps=3, alpha=1.000001), pairs, baseline, small_schedule)
    d = train_preference(pref_config("dpo", steps=3, alpha=1.000001), pairs, baseline, small_schedule)
    assert g.metrics[0]["grad_norm"] < 1e-4 * d.metrics[0]["grad_norm"]
    assert g.metrics[0]["gap_factor_mean"] < 1e-5


def test_preference_determinism_and_margin(pairs, baseline, small_schedule):
    cfg = pref_config("gapo", steps=60)
    a = train_preference(cfg, pairs, baseline, small_schedule)
    b = train_preference(cfg, pairs, baseline, small_schedule)
    assert [m["loss"] for m in a.metrics] == [m["loss"] for m in b.metrics]
    margins = [m["margin_mean"] for m in a.metrics]
    assert margins[0] == pytest.approx(0.0, abs=1e-15)
    assert np.mean(margins[-10:]) > np.mean(margins[:10])


def test_metrics_csv(tmp_path, pairs, baseline, small_schedule):
    res = train_preference(pref_config("dpo", steps=4), pairs, baseline, small_schedule)
    write_metrics_csv(tmp_path / "m.csv", res.metrics)
    with open(tmp_path / "m.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4]
    assert float(rows[1][1]) == res.metrics[0]["loss"]


def test_periodic_checkpoints(tmp_path, small_scenes, small_schedule, small_layout):
    cfg = TrainConfig(steps=6, learning_rate=1e-3, checkpoint_interval=2)
    res = pretrain(cfg, small_scenes, small_schedule, net.init_params(small_layout, 0), checkpoint_dir=tmp_path)
    assert [p.name for p in res.checkpoints] == ["pretrain_step000002.ckpt", "pretrain_step000004.ckpt",
                                                  "pretrain_step000006.ckpt"]
    assert np.array_equal(load_checkpoint(res.checkpoints[-1]).vector, res.params.vector)


def test_grad_clipping_bounds_update(pairs, baseline, small_schedule):
    cfg = replace(pref_config("dpo", steps=2), optimizer="sgd", max_grad_norm=1e-3)
    res = train_preference(cfg, pairs, baseline, small_schedule)
    step = np.linalg.norm(res.params.vector - baseline.vector)
    assert step <= 2 * 1e-3 * cfg.learning_rate * (1 + 1e-9)


# -- checkpoints ----------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, small_layout):
    p = random_params(small_layout, 5)
    save_checkpoint(p, tmp_path / "c.ckpt")
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.vector.tobytes() == p.vector.tobytes() and back.layout == p.layout


def test_checkpoint_corruption(tmp_path, small_layout):
    path = tmp_path / "c.ckpt"
    save_checkpoint(random_params(small_layout, 5), path)
    good = path.read_bytes()
    codes = set()

    path.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(MagicError) as e:
        load_checkpoint(path)
    codes.add(e.value.code)

    path.write_bytes(good[:4] + struct.pack("<I", 7) + good[8:])
    with pytest.raises(VersionError) as e:
        load_checkpoint(path)
    codes.add(e.value.code)

    path.write_bytes(good[:-100])
    with pytest.raises(TruncatedError) as e:
        load_checkpoint(path)
    codes.add(e.value.code)

    path.write_bytes(good[:2])
    with pytest.raises(MagicError):
        load_checkpoint(path)

    flipped = bytearray(good)
    flipped[len(good) // 2] ^= 0x01
    path.write_bytes(bytes(flipped))
    with pytest.raises(ChecksumError) as e:
        load_checkpoint(path)
    codes.add(e.value.code)
    assert len(codes) == 4
