"""Training loop: balance, determinism, resume, divergence handling."""

import numpy as np
import pytest

from mpsim import nn
from mpsim.training import (
    TrainingDiverged,
    TrainSchedule,
    _EpochSampler,
    evaluate,
    smoothed_curve,
    train,
)


def tiny_pools(rng, n=24, views=3):
    # separable toy task: positives are n identical patches, negatives not
    base = rng.random((n, 1, 32, 32), dtype=np.float32)
    pos = np.repeat(base, views, axis=1)
    neg = rng.random((n, views, 32, 32), dtype=np.float32)
    return pos, neg


def micro_net(seed=0):
    return nn.make_network(branch_channels=(3, 5), head_width=8, n=3, seed=seed)


class TestSchedule:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainSchedule(batch_size=7)
        with pytest.raises(ValueError):
            TrainSchedule(base_lr=0.0)
        with pytest.raises(ValueError):
            TrainSchedule(decay_period=0)

    def test_lr_schedule(self):
        s = TrainSchedule(base_lr=1e-3, decay_period=100_000)
        assert s.lr_at(0) == pytest.approx(1e-3)
        assert s.lr_at(100_000) == pytest.approx(1e-4)


class TestEpochSampler:
    def test_covers_every_index_per_epoch(self):
        s = _EpochSampler(10, np.random.default_rng(0))
        seen = np.sort(s.take(10))
        np.testing.assert_array_equal(seen, np.arange(10))

    def test_wraps_across_epochs(self):
        s = _EpochSampler(5, np.random.default_rng(0))
        idx = s.take(12)
        assert len(idx) == 12
        assert set(idx.tolist()) == set(range(5))


class TestTrain:
    def test_zero_iterations_keeps_weights(self, rng):
        pos, neg = tiny_pools(rng)
        w = micro_net()
        before = [t.copy() for _, t in w.tensors()]
        w, curve, _ = train(w, pos, neg, TrainSchedule(iterations=0, seed=1))
        assert len(curve) == 0
        for (_, t), old in zip(w.tensors(), before):
            np.testing.assert_array_equal(t, old)

    def test_loss_decreases_on_easy_task(self, rng):
        pos, neg = tiny_pools(rng, n=48)
        w = micro_net()
        sched = TrainSchedule(iterations=40, batch_size=16, base_lr=0.02,
                              decay_period=1000, seed=2)
        _, curve, _ = train(w, pos, neg, sched)
        assert curve[-5:].mean() < curve[:5].mean()

    def test_deterministic_repeat(self, rng):
        pos, neg = tiny_pools(rng)
        sched = TrainSchedule(iterations=10, batch_size=8, seed=5)
        w1, c1, _ = train(micro_net(), pos, neg, sched)
        w2, c2, _ = train(micro_net(), pos, neg, sched)
        np.testing.assert_array_equal(c1, c2)
        for (_, a), (_, b) in zip(w1.tensors(), w2.tensors()):
            np.testing.assert_array_equal(a, b)

    def test_resume_matches_uninterrupted_run(self, rng):
        pos, neg = tiny_pools(rng)
        sched_full = TrainSchedule(iterations=16, batch_size=8, seed=7)
        w_full, c_full, _ = train(micro_net(), pos, neg, sched_full)
        sched_half = TrainSchedule(iterations=8, batch_size=8, seed=7)
        w_res, c1, state = train(micro_net(), pos, neg, sched_half)
        w_res, c2, _ = train(w_res, pos, neg, sched_half, start_iteration=8, state=state)
        np.testing.assert_array_equal(np.concatenate([c1, c2]), c_full)
        for (_, a), (_, b) in zip(w_res.tensors(), w_full.tensors()):
            np.testing.assert_array_equal(a, b)

    def test_divergence_aborts_with_diagnostic(self, rng):
        pos, neg = tiny_pools(rng)
        pos[0, 0, 0, 0] = np.nan
        w = micro_net()
        with pytest.raises(TrainingDiverged, match="iteration"):
            train(w, pos, neg, TrainSchedule(iterations=50, batch_size=48, seed=1))

    def test_empty_pool_rejected(self, rng):
        pos, neg = tiny_pools(rng)
        with pytest.raises(ValueError):
            train(micro_net(), pos[:0], neg, TrainSchedule(iterations=1))


class TestEvaluate:
    def test_perfect_and_chance_bounds(self, rng):
        pos, neg = tiny_pools(rng, n=16)
        w = micro_net()
        x = np.concatenate([pos, neg])
        y = np.concatenate([np.ones(16, np.int64), np.zeros(16, np.int64)])
        acc, loss, scores = evaluate(w, x, y)
        assert 0.0 <= acc <= 1.0
        assert loss > 0.0
        assert scores.shape == (32,)
        assert np.all((scores >= 0) & (scores <= 1))


class TestSmoothedCurve:
    def test_window_mean(self):
        c = np.arange(10.0)
        sm = smoothed_curve(c, window=3)
        assert len(sm) == 8
        assert sm[0] == pytest.approx(1.0)

    def test_short_curve_cumulative(self):
        sm = smoothed_curve([4.0, 2.0], window=200)
        np.testing.assert_allclose(sm, [4.0, 3.0])

    def test_monotone_input_stays_monotone(self):
        c = np.linspace(1.0, 0.0, 500)
        sm = smoothed_curve(c, 200)
        assert np.all(np.diff(sm) <= 1e-12)
