"""SGD training loop over balanced patch batches."""

from dataclasses import dataclass

import numpy as np

from . import nn


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainSchedule:
    iterations: int = 1200
    batch_size: int = 64
    base_lr: float = 1e-3
    decay_factor: float = 0.1
    decay_period: int = 700
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.iterations, self.batch_size, self.decay_period) < 0 or (
            self.batch_size and self.batch_size % 2
        ):
            raise ValueError("schedule needs positive fields and an even batch size")
        if self.base_lr <= 0 or self.decay_period == 0:
            raise ValueError("schedule needs positive base_lr and decay_period")

    def lr_at(self, iteration):
        return nn.lr_at(iteration, self.base_lr, self.decay_factor, self.decay_period)


class _EpochSampler:
    """Without-replacement index stream, reshuffled each epoch."""

    def __init__(self, size, rng):
        self.size = size
        self.rng = rng
        self.order = rng.permutation(size)
        self.pos = 0

    def take(self, k):
        out = []
        while k > 0:
            if self.pos == self.size:
                self.order = self.rng.permutation(self.size)
                self.pos = 0
            grab = min(k, self.size - self.pos)
            out.append(self.order[self.pos : self.pos + grab])
            self.pos += grab
            k -= grab
        return np.concatenate(out)


def train(weights, pos_pool, neg_pool, schedule, start_iteration=0, state=None,
          progress=None):
    """Run the schedule; every batch is exactly half positives, half negatives.

    pos_pool/neg_pool: (N, n, side, side) float32 stacks. Returns
    (weights, loss_curve, state); weights are updated in place. Resuming:
    pass the previous end iteration as start_iteration (the lr schedule and
    batch stream continue deterministically for the same seed).
    """
    if len(pos_pool) == 0 or len(neg_pool) == 0:
        raise ValueError("both sample pools must be non-empty")
    half = schedule.batch_size // 2
    rng = np.random.default_rng((schedule.seed, 0x7A41))
    pos_stream = _EpochSampler(len(pos_pool), rng)
    neg_stream = _EpochSampler(len(neg_pool), rng)
    # replay the batch stream consumed by earlier segments of a resumed run
    for _ in range(start_iteration):
        pos_stream.take(half)
        neg_stream.take(half)
    if state is None:
        state = nn.SgdState(momentum=schedule.momentum, weight_decay=schedule.weight_decay)
    labels = np.concatenate([np.ones(half, np.int64), np.zeros(half, np.int64)])
    curve = []
    for it in range(start_iteration, start_iteration + schedule.iterations):
        batch = np.concatenate(
            [pos_pool[pos_stream.take(half)], neg_pool[neg_stream.take(half)]]
        )
        try:
            loss, grads = nn.backward(weights, batch[:, :, None], labels)
        except ValueError as e:
            if "finite" in str(e):
                raise TrainingDiverged(f"at iteration {it}: {e}") from e
            raise
        if not np.isfinite(loss):
            raise TrainingDiverged(f"loss became {loss} at iteration {it}")
        nn.sgd_step(weights, grads, schedule.lr_at(it), state)
        curve.append(loss)
        if progress is not None:
            progress(it, loss)
    return weights, np.asarray(curve), state


def evaluate(weights, patches, labels, batch=128):
    """Balanced classification accuracy and mean loss at threshold 0.5."""
    scores = []
    losses = []
    for i in range(0, len(patches), batch):
        chunk = patches[i : i + batch]
        lab = labels[i : i + batch]
        logits = nn._net_forward(weights, chunk[:, :, None])
        loss, _ = nn._batch_xent(logits, lab)
        losses.append(loss * len(chunk))
        scores.append(nn.softmax2(logits)[:, 1, 0, 0])
    scores = np.concatenate(scores)
    pred = scores > 0.5
    acc = float((pred == (np.asarray(labels) == 1)).mean())
    return acc, float(np.sum(losses) / len(patches)), scores


def smoothed_curve(curve, window=200):
    """Moving average over the given window (the monotonicity view)."""
    curve = np.asarray(curve, dtype=np.float64)
    if curve.size < window:
        return curve.cumsum() / np.arange(1, curve.size + 1)
    c = np.convolve(curve, np.ones(window) / window, mode="valid")
    return c
