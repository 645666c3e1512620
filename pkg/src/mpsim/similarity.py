"""Patch-similarity measures behind one max-oriented interface.

SAD is negated so that, like ZNCC and the learned score, larger is better.
Worst-possible values per measure: SAD/ZNCC -1.0, learned 0.0; the sweep
stores these for cells it marks invalid.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nn

MEASURES = ("sad", "zncc", "learned2", "learnedN")

WORST_SCORE = {"sad": -1.0, "zncc": -1.0, "learned2": 0.0, "learnedN": 0.0}

ZNCC_VAR_EPS = 1e-12


@dataclass(frozen=True)
class MeasureKind:
    name: str
    # all measures are normalized to higher-is-better on output
    higher_is_better: bool = True

    def __post_init__(self):
        if self.name not in MEASURES:
            raise ValueError(f"unknown measure {self.name!r} (choose from {MEASURES})")

    @property
    def learned(self):
        return self.name in ("learned2", "learnedN")

    @property
    def worst(self):
        return WORST_SCORE[self.name]


@dataclass
class Patch:
    intensities: np.ndarray  # (side, side) floats in [0,1]
    mask: np.ndarray = None  # (side, side) bool

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities)
        if self.intensities.ndim != 2 or self.intensities.shape[0] != self.intensities.shape[1]:
            raise ValueError(f"patches must be square, got {self.intensities.shape}")
        if self.mask is None:
            self.mask = np.ones(self.intensities.shape, dtype=bool)

    @property
    def side(self):
        return self.intensities.shape[0]


def _joint(a, b):
    if a.side != b.side:
        raise ValueError(f"patch sizes differ: {a.side} vs {b.side}")
    return a.mask & b.mask


def sad(a, b):
    """Negated mean absolute difference over jointly valid pixels.

    Identical patches score 0 (the maximum); an all-invalid pair scores the
    measure's worst value.
    """
    m = _joint(a, b)
    cnt = int(m.sum())
    if cnt == 0:
        return WORST_SCORE["sad"]
    diff = np.abs(
        a.intensities.astype(np.float64)[m] - b.intensities.astype(np.float64)[m]
    )
    return float(-diff.sum() / cnt)


def zncc(a, b):
    """Pearson correlation of jointly valid pixels, in [-1, 1].

    Returns 0 when either patch has (near-)zero variance.
    """
    m = _joint(a, b)
    cnt = int(m.sum())
    if cnt == 0:
        return WORST_SCORE["zncc"]
    av = a.intensities.astype(np.float64)[m]
    bv = b.intensities.astype(np.float64)[m]
    am = av - av.mean()
    bm = bv - bv.mean()
    va = (am * am).mean()
    vb = (bm * bm).mean()
    if va < ZNCC_VAR_EPS or vb < ZNCC_VAR_EPS:
        return 0.0
    r = (am * bm).mean() / np.sqrt(va * vb)
    return float(np.clip(r, -1.0, 1.0))


def pairwise_consensus(scores, mode="mean"):
    """Reduce the n-1 reference-to-partner scores to one decision score.

    Scores are sorted before reduction so the result is bitwise independent
    of partner order.
    """
    scores = np.sort(np.asarray(scores, dtype=np.float64).ravel())
    if scores.size == 0:
        raise ValueError("consensus needs at least one pairwise score")
    if not np.all(np.isfinite(scores)):
        raise ValueError("non-finite pairwise score")
    if mode == "mean":
        return float(scores.mean())
    if mode == "median":
        return float(np.median(scores))
    raise ValueError(f"unknown consensus mode {mode!r}")


def learned_multi(patches, weights):
    """n >= 2 complete patches -> network similarity score in [0, 1]."""
    arrs = []
    for p in patches:
        if isinstance(p, Patch):
            if not p.mask.all():
                raise ValueError("learned measure requires fully valid patches")
            arrs.append(p.intensities)
        else:
            arrs.append(np.asarray(p))
    score = nn.similarity_forward(arrs, weights)
    return float(score.reshape(-1)[0]) if score.size == 1 else score
