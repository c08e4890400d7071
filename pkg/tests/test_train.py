import csv
import math

import numpy as np
import pytest

from fdylka.errors import ConfigError, ContractError, DivergenceError
from fdylka.evaluation import Event
from fdylka.model import ModelConfig, build_params, forward, load_checkpoint
from fdylka.params import ParamSet
from fdylka.train import (
    LOG_COLUMNS,
    AdamW,
    Clip,
    TrainConfig,
    TrainData,
    augment,
    batch_loss,
    ema_update,
    filter_gain,
    make_batch,
    mixup,
    ramp,
    run_stage,
    schedules,
    shift,
    time_mask,
)


def tiny_model(**kw):
    base = dict(
        class_count=2,
        channels=(2, 2, 2),
        block_pools=((2, 2), (1, 2)),
        rnn_hidden=2,
        dropout_rate=0.0,
        input_frames=8,
        input_bands=8,
    )
    base.update(kw)
    return ModelConfig(**base)


def tiny_clips(cfg, n, kind="strong", seed=0):
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n):
        strong = weak = None
        if kind == "strong":
            strong = (rng.random((cfg.output_frames, cfg.class_count)) > 0.5).astype(float)
        elif kind == "weak":
            weak = (rng.random(cfg.class_count) > 0.5).astype(float)
        clips.append(Clip(f"{kind}{i}", rng.standard_normal((cfg.input_frames, cfg.input_bands)), strong, weak))
    return clips


def fake_batch(B=3, tf=1001, tt=250, bands=128, C=3, seed=0):
    rng = np.random.default_rng(seed)
    clips = [
        Clip(f"c{i}", rng.standard_normal((tf, bands)), (rng.random((tt, C)) > 0.5).astype(float))
        for i in range(B)
    ]
    return make_batch(clips, C, tt)


class TestSchedules:
    def test_ramp_examples(self):
        np.testing.assert_allclose(schedules(0, TrainConfig())[0], 0.001 * math.exp(-5), rtol=1e-12)
        np.testing.assert_allclose(schedules(0, TrainConfig())[0], 6.738e-6, rtol=1e-3)
        np.testing.assert_allclose(schedules(25, TrainConfig())[0], 2.865e-4, rtol=1e-3)

    def test_lr_exact_after_rampup(self):
        cfg = TrainConfig()
        for e in (50, 51, 120, 10_000):
            assert schedules(e, cfg)[0] == 0.001

    def test_consistency_weight_follows_ramp(self):
        cfg = TrainConfig(consistency_max_weight=2.0)
        assert schedules(50, cfg)[1] == 2.0
        np.testing.assert_allclose(schedules(10, cfg)[1], 2.0 * ramp(10), rtol=1e-15)

    def test_monotone(self):
        values = [ramp(e) for e in range(0, 80)]
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert all(v == 1.0 for v in values[50:])

    def test_negative_epoch(self):
        with pytest.raises(ContractError):
            schedules(-1, TrainConfig())


def param_pair(seed=0):
    rng = np.random.default_rng(seed)
    t, s = ParamSet(), ParamSet()
    for name, shape in (("a", (3, 2)), ("b", (4,))):
        t.add(name, rng.standard_normal(shape))
        s.add(name, rng.standard_normal(shape))
    t.add_buffer("bn.mean", rng.standard_normal(4))
    s.add_buffer("bn.mean", rng.standard_normal(4))
    return t, s


class TestEma:
    def test_closed_form(self):
        t, s = param_pair()
        t0 = {k: v.data.copy() for k, v in t.leaves.items()}
        b0 = t.buffers["bn.mean"].copy()
        alpha = 0.999
        for _ in range(5):
            ema_update(t, s, alpha)
        for k in t0:
            p = s.leaves[k].data
            np.testing.assert_allclose(t.leaves[k].data, p + alpha**5 * (t0[k] - p), rtol=0, atol=1e-12)
        p = s.buffers["bn.mean"]
        np.testing.assert_allclose(t.buffers["bn.mean"], p + alpha**5 * (b0 - p), rtol=0, atol=1e-12)

    def test_alpha_extremes(self):
        t, s = param_pair()
        before = t.leaves["a"].data.copy()
        ema_update(t, s, 1.0)
        np.testing.assert_array_equal(t.leaves["a"].data, before)
        ema_update(t, s, 0.0)
        np.testing.assert_array_equal(t.leaves["a"].data, s.leaves["a"].data)

    def test_manifest_mismatch(self):
        t, s = param_pair()
        s.add("extra", np.zeros(1))
        with pytest.raises(ContractError):
            ema_update(t, s, 0.5)


class TestLoss:
    def setup_method(self):
        self.cfg = tiny_model()
        self.params = build_params(self.cfg, 0)
        clips = tiny_clips(self.cfg, 2, "strong") + tiny_clips(self.cfg, 1, "weak") + tiny_clips(self.cfg, 1, "x")
        self.batch = make_batch(clips, 2, self.cfg.output_frames)

    def outputs(self, seed):
        p = build_params(self.cfg, seed)
        return forward(self.batch.features, p, self.cfg)

    def test_components_and_weighted_sum(self):
        s, t = self.outputs(0), self.outputs(1)
        total, c = batch_loss(s, t, self.batch, 0.5, 1.7)
        assert min(c.strong, c.weak, c.cons) >= 0
        np.testing.assert_allclose(c.total, c.strong + 0.5 * c.weak + 1.7 * c.cons, rtol=0, atol=1e-12)
        np.testing.assert_allclose(total.item(), c.total, rtol=0, atol=0)

    def test_strong_term_only_uses_strong_rows(self):
        s = self.outputs(0)
        _, c = batch_loss(s, None, self.batch)
        p = np.clip(s.strong.data[:2], 1e-7, 1 - 1e-7)
        y = self.batch.strong[:2]
        expected = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
        np.testing.assert_allclose(c.strong, expected, rtol=1e-6)
        assert c.cons == 0.0

    def test_zero_consistency_matches_supervised_gradients(self):
        grads = []
        for with_teacher in (True, False):
            p = build_params(self.cfg, 0)
            out = forward(self.batch.features, p, self.cfg)
            teacher = self.outputs(3) if with_teacher else None
            total, _ = batch_loss(out, teacher, self.batch, 0.5, 0.0)
            total.backward()
            grads.append({k: v.grad.copy() for k, v in p.leaves.items() if v.grad is not None})
        assert grads[0].keys() == grads[1].keys()
        for k in grads[0]:
            np.testing.assert_array_equal(grads[0][k], grads[1][k])

    def test_shape_mismatch(self):
        s = self.outputs(0)
        with pytest.raises(ContractError):
            make_batch(tiny_clips(self.cfg, 4), 2, self.cfg.output_frames + 1)
        bad = make_batch(tiny_clips(self.cfg, 4, "weak"), 2, self.cfg.output_frames + 1)
        with pytest.raises(ContractError):
            batch_loss(s, None, bad)


class TestAugment:
    def test_mixup_identity_cases(self):
        b = fake_batch()
        out = mixup(b, 1.0, [2, 0, 1])
        np.testing.assert_array_equal(out.features, b.features)
        np.testing.assert_array_equal(out.strong, b.strong)
        self_mix = mixup(b, 0.5, [0, 1, 2])
        np.testing.assert_allclose(self_mix.features, b.features, rtol=0, atol=1e-15)

    def test_time_mask_span(self):
        b = fake_batch()
        out = time_mask(b, 40, 60)
        assert np.all(out.features[:, 40:60] == 0)
        np.testing.assert_array_equal(out.features[:, :40], b.features[:, :40])
        np.testing.assert_array_equal(out.features[:, 60:], b.features[:, 60:])
        # frames 40..59 of 1001 map to target frames 9..14 of 250
        assert np.all(out.strong[:, 9:15] == 0)
        np.testing.assert_array_equal(out.strong[:, :9], b.strong[:, :9])
        np.testing.assert_array_equal(out.strong[:, 15:], b.strong[:, 15:])

    def test_shift_moves_targets_with_features(self):
        b = fake_batch(B=1)
        out = shift(b, 8, 2)
        np.testing.assert_array_equal(out.features[0, 8:, 2:], b.features[0, :-8, :-2])
        np.testing.assert_array_equal(out.strong[0, 2:], b.strong[0, :-2])

    def test_filter_gain_in_log_domain(self):
        b = fake_batch(B=2)
        gain = np.full(128, 10.0)
        out = filter_gain(b, gain, 1, log_scale=0.5)
        np.testing.assert_allclose(out.features[1] - b.features[1], math.log(10.0) * 0.5, rtol=1e-12)
        np.testing.assert_array_equal(out.features[0], b.features[0])

    def test_augment_leaves_input_untouched_and_is_seeded(self):
        b = fake_batch()
        before = b.features.copy()
        cfg = TrainConfig(mixup_prob=1, time_mask_prob=1, shift_prob=1, filter_prob=1)
        a1 = augment(b, cfg, np.random.default_rng(3))
        a2 = augment(b, cfg, np.random.default_rng(3))
        np.testing.assert_array_equal(b.features, before)
        np.testing.assert_array_equal(a1.features, a2.features)
        assert not np.array_equal(a1.features, before)

    def test_mixup_stays_within_label_kind(self):
        rng = np.random.default_rng(0)
        clips = [Clip("s", np.ones((8, 8)), np.ones((2, 2))), Clip("u", np.zeros((8, 8)))]
        b = make_batch(clips, 2, 2)
        cfg = TrainConfig(mixup_prob=1, time_mask_prob=0, shift_prob=0, filter_prob=0)
        for _ in range(10):
            out = augment(b, cfg, rng)
            np.testing.assert_array_equal(out.features, b.features)


class TestAdamW:
    def one_leaf(self, value, grad):
        p = ParamSet()
        p.add("w", np.asarray(value, dtype=float))
        p.leaves["w"].grad = np.asarray(grad, dtype=float)
        return p

    def test_zero_gradient_no_decay(self):
        p = self.one_leaf([1.0, -2.0], [0.0, 0.0])
        AdamW(p).step(0.01, 0.0)
        np.testing.assert_array_equal(p.leaves["w"].data, [1.0, -2.0])

    def test_first_step_magnitude(self):
        p = self.one_leaf(0.5, 1.0)
        AdamW(p).step(0.001, 0.0)
        np.testing.assert_allclose(0.5 - p.leaves["w"].data, 0.001, rtol=1e-6)

    def test_decoupled_decay(self):
        p = self.one_leaf([2.0, -4.0], [0.0, 0.0])
        opt = AdamW(p)
        for _ in range(3):
            opt.step(0.1, 0.01)
        np.testing.assert_allclose(p.leaves["w"].data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.01) ** 3, rtol=1e-14)

    def test_nan_gradient_names_leaf(self):
        p = self.one_leaf([1.0], [np.nan])
        with pytest.raises(DivergenceError, match="'w'|w"):
            AdamW(p).step(0.1)

    def test_frozen_overlap_rejected(self):
        p = self.one_leaf([1.0], [1.0])
        with pytest.raises(ContractError):
            AdamW(p).step(0.1, frozen=p)


class TestRunStage:
    def setup_method(self):
        self.cfg = tiny_model()
        self.clips = tiny_clips(self.cfg, 4)

    def data(self, **kw):
        return TrainData(("Cat", "Dog"), strong=self.clips, **kw)

    def recipe(self, **kw):
        base = dict(epochs=3, n_strong=2, n_weak=0, n_unlabeled=0)
        base.update(kw)
        return TrainConfig(**base)

    def test_zero_epochs(self):
        res = run_stage(1, self.data(), self.cfg, self.recipe(epochs=0))
        assert res.log == []
        fresh = build_params(self.cfg, 0)
        for k, t in fresh.leaves.items():
            np.testing.assert_array_equal(res.student.leaves[k].data, t.data)

    def test_deterministic_logs_and_checkpoints(self, tmp_path):
        events = [Event("strong0", 0.0, 0.5, "Cat")]
        runs = []
        for name in ("a", "b"):
            data = self.data(validation=self.clips, validation_events=events)
            res = run_stage(1, data, self.cfg, self.recipe(), tmp_path / name)
            runs.append(res)
        assert (tmp_path / "a" / "metrics_stage1.csv").read_bytes() == (tmp_path / "b" / "metrics_stage1.csv").read_bytes()
        for role in ("student", "teacher"):
            pa, pb = runs[0].best[role]["path"], runs[1].best[role]["path"]
            assert pa.name == pb.name and pa.read_bytes() == pb.read_bytes()
            _, _, meta = load_checkpoint(pa)
            assert meta["role"] == role and meta["stage"] == 1

    def test_log_columns(self, tmp_path):
        run_stage(1, self.data(), self.cfg, self.recipe(epochs=2), tmp_path)
        rows = list(csv.reader(open(tmp_path / "metrics_stage1.csv")))
        assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 3

    def test_training_changes_student_and_teacher_tracks(self):
        res = run_stage(1, self.data(), self.cfg, self.recipe(epochs=2, ema_alpha=0.5))
        fresh = build_params(self.cfg, 0)
        moved = [not np.array_equal(res.student.leaves[k].data, t.data) for k, t in fresh.leaves.items()]
        assert any(moved)
        for k in fresh.leaves:
            assert res.student.leaves[k] is not res.teacher.leaves[k]

    def test_stage2_without_pseudo(self):
        with pytest.raises(ConfigError, match="pseudo"):
            run_stage(2, self.data(), self.cfg, self.recipe())

    def test_stage2_uses_pseudo_clips(self):
        data = self.data(pseudo=tiny_clips(self.cfg, 2, seed=9))
        res = run_stage(2, data, self.cfg, self.recipe(epochs=1))
        assert len(res.log) == 1

    def test_empty_stream_with_quota(self):
        with pytest.raises(ConfigError, match="weak"):
            run_stage(1, self.data(), self.cfg, self.recipe(n_weak=1))

    def test_class_count_mismatch(self):
        data = TrainData(("a", "b", "c"), strong=self.clips)
        with pytest.raises(ConfigError):
            run_stage(1, data, self.cfg, self.recipe())

    def test_full_mean_teacher_batch(self):
        data = self.data(weak=tiny_clips(self.cfg, 2, "weak"), unlabeled=tiny_clips(self.cfg, 3, "x"))
        res = run_stage(1, data, self.cfg, self.recipe(n_strong=1, n_weak=1, n_unlabeled=2, epochs=2))
        assert all(r["loss_cons"] >= 0 for r in res.log)
        assert res.log[1]["loss_cons"] > 0


class TestConfig:
    def test_round_trip(self):
        cfg = TrainConfig(epochs=7, mixup_prob=0.1)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    def test_rejects_unknown_and_invalid(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"epochz": 1})
        with pytest.raises(ConfigError):
            TrainConfig(n_strong=0, n_weak=0, n_unlabeled=0)
        with pytest.raises(ConfigError):
            TrainConfig(ema_alpha=1.0)
