"""Plane-sweep engine: cost volumes, filtering, and depth-map extraction.

For every hypothesized depth plane the partner views are warped into the
reference frame. SAD/ZNCC score 32x32 windows densely (integral-image sums)
and reduce the per-partner scores by consensus; the learned measure runs the
fully convolutional network on 128x128 tiles, each yielding a 25x25 score
grid (stride 4) that is block-upsampled into its 100x100 target region.

Cells whose windows touch a masked pixel in any view are invalid and carry
the measure's worst score; image borders where no full window fits stay
invalid everywhere.
"""

from dataclasses import dataclass, field

import numpy as np

from . import backend as B
from . import nn
from .geometry import plane_homography, warp_image
from .similarity import MeasureKind, ZNCC_VAR_EPS

SCORE_STRIDE = 4


@dataclass
class SweepConfig:
    plane_count: int = 256
    patch_side: int = 32
    tile_side: int = 128
    score_stride: int = SCORE_STRIDE
    box_filter: bool = True
    box_filter_radius: int = 2
    subpixel: bool = True
    consensus: str = "mean"
    # fraction of depth planes a pixel must be scored at to get an estimate;
    # pixels seen at only a few hypotheses argmax over a truncated range and
    # produce border junk, so the default demands full coverage
    min_coverage: float = 1.0

    def __post_init__(self):
        if self.patch_side != 32:
            raise ValueError("the similarity architecture fixes patches at 32x32")
        if self.score_stride != SCORE_STRIDE:
            raise ValueError("score stride is fixed at 4 by the two pooling layers")
        if self.tile_side < 32 or self.tile_side % 4:
            raise ValueError("tile side must be >= 32 and a multiple of 4")
        if self.box_filter_radius < 0:
            raise ValueError("box filter radius must be >= 0")
        if self.consensus not in ("mean", "median"):
            raise ValueError(f"unknown consensus mode {self.consensus!r}")
        if not 0.0 < self.min_coverage <= 1.0:
            raise ValueError("min_coverage must be in (0, 1]")

    @property
    def score_grid_side(self):
        """Scores per axis produced from one tile."""
        return (self.tile_side - self.patch_side) // SCORE_STRIDE + 1


@dataclass
class CostVolume:
    scores: np.ndarray  # (D,H,W) float32, max-oriented
    valid: np.ndarray  # (D,H,W) bool
    depths: np.ndarray  # (D,) plane depths, meters

    def __post_init__(self):
        if self.scores.shape != self.valid.shape or self.scores.shape[0] != len(self.depths):
            raise ValueError("cost volume dims disagree")


@dataclass
class DepthMap:
    depth: np.ndarray  # (H,W) float32, meters
    confidence: np.ndarray  # (H,W) float32, winning score
    valid: np.ndarray  # (H,W) bool


def tile_origins(extent, tile_side):
    """Tile start offsets covering [0, extent) with the last tile shifted
    inward; consecutive tiles abut in score space (stride = coverage)."""
    if extent < tile_side:
        raise ValueError(f"image extent {extent} smaller than tile {tile_side}")
    cover = tile_side - 28  # 4 * score_grid_side
    xs = list(range(0, extent - tile_side + 1, cover))
    if xs[-1] != extent - tile_side:
        xs.append(extent - tile_side)
    return xs


def _window_valid(mask, side):
    """Bool grid of fully valid side x side windows, indexed by top-left."""
    cnt = B.window_sum(mask.astype(np.float32), side)
    return cnt > side * side - 0.5


def _zncc_maps(ref, warped, side, ref_stats):
    """Dense ZNCC of all full windows; garbage where windows are invalid."""
    nn_px = side * side
    sa, va = ref_stats
    b = warped.data.astype(np.float32)
    sb = B.window_sum(b, side)
    sb2 = B.window_sum(b * b, side)
    sab = B.window_sum(ref * b, side)
    vb = sb2 - sb * sb / nn_px
    cov = sab - sa * sb / nn_px
    small = (va < nn_px * ZNCC_VAR_EPS) | (vb < nn_px * ZNCC_VAR_EPS)
    den = np.sqrt(np.where(small, 1.0, va * vb))
    return np.clip(np.where(small, 0.0, cov / den), -1.0, 1.0)


def _sad_maps(ref, warped, side):
    diff = np.abs(ref - warped.data.astype(np.float32))
    return -B.window_sum(diff, side) / (side * side)


def _classic_slice(ref_img, warped_list, config):
    """One (H,W) consensus score slice + validity for SAD/ZNCC."""
    side = config.patch_side
    h, w = ref_img.shape
    ref = ref_img.data.astype(np.float32)
    sa = B.window_sum(ref, side)
    sa2 = B.window_sum(ref * ref, side)
    va = sa2 - sa * sa / (side * side)
    ref_ok = _window_valid(ref_img.mask, side) if not ref_img.mask.all() else True

    per_partner = []
    valid = np.ones(sa.shape, dtype=bool) if ref_ok is True else ref_ok.copy()
    for warped, kind in warped_list:
        if kind == "zncc":
            per_partner.append(_zncc_maps(ref, warped, side, (sa, va)))
        else:
            per_partner.append(_sad_maps(ref, warped, side))
        valid &= _window_valid(warped.mask, side)
    stack = np.stack(per_partner)
    if config.consensus == "mean":
        score = stack.mean(axis=0)
    else:
        score = np.median(stack, axis=0)
    return score.astype(np.float32), valid


def _learned_tile_scores(feats_by_view, weights, config):
    """Fused head pass for one tile; feats_by_view (n, C, h, w)."""
    fused = nn.fuse(feats_by_view[None], weights.fusion, weights.n_at_training)
    logits = nn._head_forward(fused, weights)
    return nn.softmax2(logits)[0, 1]


def build_cost_volume(ref_img, ref_cam, partners, planes, measure, config, weights=None):
    """Score every depth plane for every pixel of the reference view.

    partners: list of (GrayImage, Camera). Returns a max-oriented CostVolume;
    for learned measures ``weights`` must be provided.
    """
    planes = np.atleast_1d(np.asarray(planes, dtype=np.float64))
    if planes.size == 0:
        raise ValueError("empty depth plane list")
    if not partners:
        raise ValueError("need at least one partner view")
    if isinstance(measure, str):
        measure = MeasureKind(measure)
    if measure.learned and weights is None:
        raise ValueError(f"measure {measure.name} requires network weights")
    h, w = ref_img.shape
    for img, _ in partners:
        if img.shape != (h, w):
            raise ValueError("partner image size differs from reference")

    scores = np.full((planes.size, h, w), measure.worst, dtype=np.float32)
    valid = np.zeros((planes.size, h, w), dtype=bool)
    vol = CostVolume(scores, valid, planes)

    homs = [
        [plane_homography(ref_cam, cam, d) for (_, cam) in partners] for d in planes
    ]
    if measure.name in ("sad", "zncc"):
        side = config.patch_side
        lo = side // 2
        for k, d in enumerate(planes):
            warped = [
                (warp_image(img, homs[k][j]), measure.name)
                for j, (img, _) in enumerate(partners)
            ]
            sl, ok = _classic_slice(ref_img, warped, config)
            scores[k, lo : lo + sl.shape[0], lo : lo + sl.shape[1]] = np.where(
                ok, sl, measure.worst
            )
            valid[k, lo : lo + sl.shape[0], lo : lo + sl.shape[1]] = ok
    else:
        _learned_volume(vol, ref_img, partners, homs, measure, config, weights)
    return vol


def _learned_volume(vol, ref_img, partners, homs, measure, config, weights):
    tile = config.tile_side
    side = config.patch_side
    m = config.score_grid_side
    h, w = ref_img.shape
    oys = tile_origins(h, tile)
    oxs = tile_origins(w, tile)
    tiles = [(ty, tx) for ty in oys for tx in oxs]
    anchor = side // 2 - SCORE_STRIDE // 2  # block for the patch centered at c
    dtype = weights.dtype

    # reference branch features are depth-independent: one pass for all tiles
    ref_ok_full = (
        _window_valid(ref_img.mask, side) if not ref_img.mask.all() else None
    )
    ref_stack = np.stack(
        [ref_img.data[ty : ty + tile, tx : tx + tile] for ty, tx in tiles]
    )[:, None].astype(dtype)
    ref_feats = nn._branch_forward(np.ascontiguousarray(ref_stack), weights)

    n_part = len(partners)
    for k in range(len(vol.depths)):
        warped = [warp_image(img, homs[k][j]) for j, (img, _) in enumerate(partners)]
        wins = [_window_valid(wi.mask, side) for wi in warped]
        part_stack = np.stack(
            [
                wi.data[ty : ty + tile, tx : tx + tile]
                for ty, tx in tiles
                for wi in warped
            ]
        )[:, None].astype(dtype)
        part_feats = nn._branch_forward(np.ascontiguousarray(part_stack), weights)
        cshape = part_feats.shape[1:]
        part_feats = part_feats.reshape(len(tiles), n_part, *cshape)

        for ti, (ty, tx) in enumerate(tiles):
            ok = np.ones((m, m), dtype=bool)
            if ref_ok_full is not None:
                ok &= ref_ok_full[ty : ty + 4 * m : 4, tx : tx + 4 * m : 4]
            for j in range(n_part):
                ok &= wins[j][ty : ty + 4 * m : 4, tx : tx + 4 * m : 4]
            if measure.name == "learnedN":
                feats = np.concatenate([ref_feats[ti : ti + 1], part_feats[ti]])
                probs = _learned_tile_scores(feats, weights, config)
            else:
                # 2-view mode: one pairwise map per partner, then consensus
                pair = [
                    _learned_tile_scores(
                        np.stack([ref_feats[ti], part_feats[ti, j]]), weights, config
                    )
                    for j in range(n_part)
                ]
                if config.consensus == "mean":
                    probs = np.mean(pair, axis=0)
                else:
                    probs = np.median(pair, axis=0)
            probs = np.where(ok, probs, measure.worst).astype(np.float32)
            up = np.repeat(np.repeat(probs, SCORE_STRIDE, 0), SCORE_STRIDE, 1)
            upok = np.repeat(np.repeat(ok, SCORE_STRIDE, 0), SCORE_STRIDE, 1)
            y0 = ty + anchor
            x0 = tx + anchor
            vol.scores[k, y0 : y0 + 4 * m, x0 : x0 + 4 * m] = up
            vol.valid[k, y0 : y0 + 4 * m, x0 : x0 + 4 * m] = upok


def box_filter_volume(vol, radius):
    """Per-slice spatial box average honoring validity; radius 0 is identity."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return vol
    s = 2 * radius + 1
    d, h, w = vol.scores.shape
    out = np.array(vol.scores, copy=True)
    for k in range(d):
        ok = vol.valid[k]
        pad_s = np.zeros((h + 2 * radius, w + 2 * radius), dtype=np.float32)
        pad_m = np.zeros_like(pad_s)
        pad_s[radius : radius + h, radius : radius + w] = np.where(ok, vol.scores[k], 0.0)
        pad_m[radius : radius + h, radius : radius + w] = ok
        num = B.window_sum(pad_s, s)
        den = B.window_sum(pad_m, s)
        filt = np.where(den > 0.5, num / np.maximum(den, 1.0), 0.0)
        out[k] = np.where(ok, filt, vol.scores[k]).astype(np.float32)
    return CostVolume(out, vol.valid.copy(), vol.depths)


def extract_depth(vol, config):
    """Argmax over depth per pixel (ties to the smaller plane index), with
    optional three-point parabola refinement in inverse depth.

    Pixels scored at fewer than min_coverage of the planes are invalid."""
    d, h, w = vol.scores.shape
    any_valid = vol.valid.mean(axis=0) >= config.min_coverage - 1e-12
    masked = np.where(vol.valid, vol.scores, -np.inf)
    best = masked.argmax(axis=0)
    conf = np.take_along_axis(masked, best[None], axis=0)[0]
    inv = 1.0 / np.asarray(vol.depths, dtype=np.float64)

    idep = inv[best]
    if config.subpixel and d >= 3:
        ys, xs = np.nonzero(any_valid & (best > 0) & (best < d - 1))
        k = best[ys, xs]
        s0 = masked[k - 1, ys, xs].astype(np.float64)
        s1 = masked[k, ys, xs].astype(np.float64)
        s2 = masked[k + 1, ys, xs].astype(np.float64)
        ok = np.isfinite(s0) & np.isfinite(s2)
        s0 = np.where(ok, s0, s1)
        s2 = np.where(ok, s2, s1)
        den = s0 - 2.0 * s1 + s2
        ok &= den < 0  # strict local maximum; flat triples stay on the plane
        delta = np.zeros_like(den)
        np.divide(s0 - s2, 2.0 * den, out=delta, where=ok)
        delta = np.clip(delta, -0.5, 0.5)
        step_up = inv[np.minimum(k + 1, d - 1)] - inv[k]
        step_dn = inv[k] - inv[np.maximum(k - 1, 0)]
        idep_ref = inv[k] + np.where(delta >= 0, delta * step_up, delta * step_dn)
        idep[ys, xs] = np.where(ok, idep_ref, inv[k])

    depth = np.where(any_valid, 1.0 / idep, 0.0)
    depth = np.clip(depth, vol.depths.min(), vol.depths.max())
    depth = np.where(any_valid, depth, 0.0).astype(np.float32)
    conf = np.where(any_valid, conf, 0.0).astype(np.float32)
    return DepthMap(depth, conf, any_valid)
