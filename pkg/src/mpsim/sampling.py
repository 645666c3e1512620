"""Ground-truth-driven patch sampling for training the similarity network.

Positives take the n-view patch tuple at the depth plane nearest the ground
truth; their negative twins re-warp the partners at a plane a fixed number of
steps away (sign drawn at random). Patches travel through the same
homography + bilinear sampling code the sweep uses at test time, so training
only ever sees tuples that can occur along epipolar geometry.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import plane_homography, warp_patch

PATCH_SIDE = 32


@dataclass
class PatchSample:
    patches: np.ndarray  # (n, side, side) float32, reference first
    label: int  # 1 match, 0 mismatch
    pixel: tuple  # (x, y) in the reference view
    plane_index: int  # plane the partners were warped at


def snap_plane_index(depth, planes):
    """Nearest plane by inverse depth (planes are disparity-uniform)."""
    inv = 1.0 / np.asarray(planes, dtype=np.float64)
    return int(np.argmin(np.abs(inv - 1.0 / float(depth))))


def nearest_partner_indices(scene, n_views):
    """Indices of the n_views-1 cameras closest to the reference center."""
    ref_c = scene.cameras[0].center()
    dists = [
        (float(np.linalg.norm(cam.center() - ref_c)), i)
        for i, cam in enumerate(scene.cameras[1:], start=1)
    ]
    dists.sort()
    want = n_views - 1
    if want > len(dists):
        raise ValueError(f"scene has {len(dists) + 1} views, need {n_views}")
    return [i for _, i in dists[:want]]


def _patch_tuple(scene, partner_idx, pixel, depth):
    """Warp each partner's window at the given plane; None if any is masked."""
    x, y = pixel
    out = []
    ref_cam = scene.cameras[0]
    for j in partner_idx:
        h = plane_homography(ref_cam, scene.cameras[j], depth)
        vals, ok = warp_patch(scene.images[j], h, (x, y), PATCH_SIDE)
        if not ok.all():
            return None
        out.append(vals)
    return out


def sample_patches(
    scene,
    planes,
    count,
    n_views=5,
    neg_offset=15,
    seed=0,
    both_signs=False,
    highlight_fraction=0.0,
):
    """Draw a balanced list of PatchSamples (count total, half positives).

    neg_offset is the plane-index distance of negatives from the snapped
    ground-truth plane. both_signs emits the +offset and -offset twins for
    every positive instead of a random one. highlight_fraction forces that
    share of positions into the scene's specular mask when one exists.
    """
    if count % 2:
        raise ValueError("count must be even (balanced positives/negatives)")
    if neg_offset < 1:
        raise ValueError("neg_offset must be >= 1")
    planes = np.asarray(planes, dtype=np.float64)
    rng = np.random.default_rng(seed)
    half = PATCH_SIDE // 2
    hgt, wd = scene.gt_depth.shape

    usable = scene.gt_valid.copy()
    usable[:half, :] = False
    usable[hgt - half :, :] = False
    usable[:, :half] = False
    usable[:, wd - half :] = False
    cand_y, cand_x = np.nonzero(usable)
    if cand_y.size == 0:
        raise ValueError("scene has no usable ground-truth pixels")
    hl = usable & scene.highlight_mask
    hl_y, hl_x = np.nonzero(hl)

    partner_idx = nearest_partner_indices(scene, n_views)
    ref_img = scene.images[0].data
    pairs_needed = count // 2
    samples = []
    attempts = 0
    max_attempts = 200 * pairs_needed + 1000
    while len(samples) < count and attempts < max_attempts:
        attempts += 1
        use_hl = hl_y.size > 0 and rng.random() < highlight_fraction
        if use_hl:
            i = rng.integers(hl_y.size)
            y, x = int(hl_y[i]), int(hl_x[i])
        else:
            i = rng.integers(cand_y.size)
            y, x = int(cand_y[i]), int(cand_x[i])
        k_gt = snap_plane_index(scene.gt_depth[y, x], planes)
        signs = (-1, 1) if both_signs else ((-1,) if rng.random() < 0.5 else (1,))
        k_negs = [k_gt + s * neg_offset for s in signs]
        if any(k < 0 or k >= planes.size for k in k_negs):
            continue
        pos = _patch_tuple(scene, partner_idx, (x, y), planes[k_gt])
        if pos is None:
            continue
        negs = [_patch_tuple(scene, partner_idx, (x, y), planes[k]) for k in k_negs]
        if any(n is None for n in negs):
            continue
        ref_patch = ref_img[y - half : y + half, x - half : x + half]
        samples.append(
            PatchSample(
                np.stack([ref_patch] + pos).astype(np.float32), 1, (x, y), k_gt
            )
        )
        for k_neg, neg in zip(k_negs, negs):
            samples.append(
                PatchSample(
                    np.stack([ref_patch] + neg).astype(np.float32), 0, (x, y), k_neg
                )
            )
        if len(samples) > count:  # both_signs can overshoot by one pair
            samples = samples[:count]
    if len(samples) < count:
        raise ValueError(
            f"could only draw {len(samples)}/{count} samples; "
            "scene coverage or plane range too tight"
        )
    return samples


def sample_pools(scenes, planes, count_per_scene, n_views=5, neg_offset=15, seed=0,
                 highlight_fraction=0.0):
    """Sample several scenes into (positives, negatives) stacked pools."""
    pos, neg = [], []
    seeds = np.random.SeedSequence(seed).spawn(len(scenes))
    for scene, ss in zip(scenes, seeds):
        samples = sample_patches(
            scene,
            planes,
            count_per_scene,
            n_views=n_views,
            neg_offset=neg_offset,
            seed=ss,
            highlight_fraction=highlight_fraction,
        )
        for s in samples:
            (pos if s.label else neg).append(s.patches)
    return np.stack(pos), np.stack(neg)
