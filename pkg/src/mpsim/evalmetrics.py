"""Point-cloud accuracy/completeness evaluation and error-map rendering.

Accuracy: truncated distances from reconstructed points to their nearest
ground-truth points; completeness swaps the roles. Both report mean and
median in millimeters, with distances clipped at the truncation threshold
before either statistic (the median is computed on clipped values too, noted
in the output metadata).
"""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_TRUNC_MM = 20.0
METERS_TO_MM = 1000.0


@dataclass
class EvalResult:
    accuracy_mean_mm: float
    accuracy_median_mm: float
    completeness_mean_mm: float
    completeness_median_mm: float
    truncation_mm: float
    recon_points: int
    gt_points: int
    median_truncated: bool = True  # medians use truncated distances

    def to_dict(self):
        return asdict(self)


def nn_distance(from_points, to_points):
    """Euclidean nearest-neighbor distance per source point (exact)."""
    from_points = np.asarray(from_points, dtype=np.float64)
    to_points = np.asarray(to_points, dtype=np.float64)
    if from_points.size == 0 or to_points.size == 0:
        raise ValueError("point clouds must be non-empty")
    dists, _ = cKDTree(to_points).query(from_points, k=1)
    return np.atleast_1d(dists)


def nn_distance_bruteforce(from_points, to_points):
    """O(N*M) reference used by the oracle tests."""
    from_points = np.asarray(from_points, dtype=np.float64)
    to_points = np.asarray(to_points, dtype=np.float64)
    if from_points.size == 0 or to_points.size == 0:
        raise ValueError("point clouds must be non-empty")
    d2 = ((from_points[:, None, :] - to_points[None, :, :]) ** 2).sum(-1)
    return np.sqrt(d2.min(axis=1))


def _truncated_stats(dists_mm, trunc_mm):
    clipped = np.minimum(dists_mm, trunc_mm)
    return float(clipped.mean()), float(np.median(clipped))


def accuracy(recon, gt, trunc_mm=DEFAULT_TRUNC_MM, unit_to_mm=METERS_TO_MM):
    """(mean, median) truncated distance recon -> nearest gt, in mm."""
    d = nn_distance(recon, gt) * unit_to_mm
    return _truncated_stats(d, trunc_mm)


def completeness(gt, recon, trunc_mm=DEFAULT_TRUNC_MM, unit_to_mm=METERS_TO_MM):
    """(mean, median) truncated distance gt -> nearest recon, in mm."""
    d = nn_distance(gt, recon) * unit_to_mm
    return _truncated_stats(d, trunc_mm)


def evaluate_clouds(recon, gt, trunc_mm=DEFAULT_TRUNC_MM, unit_to_mm=METERS_TO_MM):
    am, amd = accuracy(recon, gt, trunc_mm, unit_to_mm)
    cm, cmd = completeness(gt, recon, trunc_mm, unit_to_mm)
    return EvalResult(am, amd, cm, cmd, trunc_mm, len(recon), len(gt))


# ---------------------------------------------------------------------------
# error heatmaps

# dark blue (no difference) through to dark red (at/above truncation); the
# blue fraction B/(R+G+B) decreases and the red fraction increases all along
# the ramp, so larger errors are never bluer
_RAMP = np.array(
    [
        [0.00, 0.00, 0.80],
        [0.00, 0.50, 0.80],
        [0.00, 0.80, 0.60],
        [0.50, 0.90, 0.30],
        [0.90, 0.70, 0.00],
        [0.90, 0.30, 0.00],
        [0.55, 0.00, 0.00],
    ]
)


def _colormap(t):
    """t in [0,1] -> RGB via piecewise-linear ramp."""
    t = np.clip(t, 0.0, 1.0)
    pos = t * (len(_RAMP) - 1)
    i0 = np.minimum(pos.astype(int), len(_RAMP) - 2)
    frac = (pos - i0)[..., None]
    return (1 - frac) * _RAMP[i0] + frac * _RAMP[i0 + 1]


def error_heatmap(est_depth, gt_depth, gt_mask=None, trunc_mm=DEFAULT_TRUNC_MM,
                  unit_to_mm=METERS_TO_MM, log_floor_mm=0.1):
    """|est - gt| on a log scale as an RGB uint8 image; no-GT pixels black.

    0 mm maps to dark blue, trunc_mm and above to dark red, monotonically.
    """
    est_depth = np.asarray(est_depth, dtype=np.float64)
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    if est_depth.shape != gt_depth.shape:
        raise ValueError("depth maps differ in size")
    if gt_mask is None:
        gt_mask = gt_depth > 0
    err_mm = np.abs(est_depth - gt_depth) * unit_to_mm
    t = np.log1p(err_mm / log_floor_mm) / np.log1p(trunc_mm / log_floor_mm)
    rgb = _colormap(t)
    rgb[~gt_mask] = 0.0
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
