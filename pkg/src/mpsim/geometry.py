"""Pinhole cameras, depth-plane sampling, plane-induced homographies, warping.

Conventions: poses are world-to-camera (x_cam = R @ X + t), matrices row-major,
pixel centers at integer coordinates with x along columns (u) and y along rows
(v). Depth is the z coordinate in the camera frame, meters.
"""

from dataclasses import dataclass

import numpy as np

from . import backend as B


class DegenerateGeometryError(ValueError):
    """Plane or homography configuration with no valid mapping."""


class BehindCameraError(ValueError):
    """Point projects behind the camera center."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def matrix(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def inverse(self):
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class Pose:
    r: np.ndarray  # (3,3) world-to-camera rotation
    t: np.ndarray  # (3,) world-to-camera translation

    def __post_init__(self):
        r = np.asarray(self.r, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        if r.shape != (3, 3) or t.shape != (3,):
            raise ValueError("pose needs a 3x3 rotation and 3-vector translation")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant must be +1")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "t", t)


@dataclass(frozen=True)
class Camera:
    intr: Intrinsics
    pose: Pose

    def center(self):
        """Camera center in world coordinates."""
        return -self.pose.r.T @ self.pose.t


@dataclass(frozen=True)
class DepthRange:
    z_min: float
    z_max: float
    plane_count: int = 256

    def __post_init__(self):
        if not 0 < self.z_min < self.z_max:
            raise ValueError("need 0 < z_min < z_max")
        if self.plane_count < 2:
            raise ValueError("need at least 2 planes")


@dataclass
class GrayImage:
    data: np.ndarray  # (H,W) float32 in [0,1]
    mask: np.ndarray  # (H,W) bool, False where sampling failed

    @classmethod
    def full(cls, data):
        data = np.asarray(data, dtype=np.float32)
        return cls(data, np.ones(data.shape, dtype=bool))

    @property
    def shape(self):
        return self.data.shape


def depth_planes(depth_range):
    """Plane depths uniform in inverse depth (disparity), z_min first.

    d_k = 1 / (1/z_min + (k/(D-1)) * (1/z_max - 1/z_min)).
    """
    d = depth_range.plane_count
    inv = np.linspace(1.0 / depth_range.z_min, 1.0 / depth_range.z_max, d)
    return 1.0 / inv


def relative_pose(ref, src):
    """(R_rel, t_rel) with x_src = R_rel @ x_ref + t_rel (camera frames)."""
    r_rel = src.pose.r @ ref.pose.r.T
    t_rel = src.pose.t - r_rel @ ref.pose.t
    return r_rel, t_rel


def plane_homography(ref, src, depth):
    """Pixel map ref -> src induced by the fronto-parallel plane z = depth
    (in the reference camera frame). Normalized so H[2,2] = 1."""
    if depth <= 0:
        raise ValueError("plane depth must be positive")
    r_rel, t_rel = relative_pose(ref, src)
    n = np.array([0.0, 0.0, 1.0])
    m = r_rel + np.outer(t_rel, n) / depth
    if abs(np.linalg.det(m)) < 1e-12:
        raise DegenerateGeometryError(
            f"plane z={depth} passes through the source camera center"
        )
    h = src.intr.matrix() @ m @ ref.intr.inverse()
    if abs(h[2, 2]) > 1e-15:
        h = h / h[2, 2]
    return h


def _apply_homography(h, xs, ys):
    """Map pixel coords through h; returns (x', y', finite-denominator mask)."""
    den = h[2, 0] * xs + h[2, 1] * ys + h[2, 2]
    ok = np.abs(den) > 1e-12
    safe = np.where(ok, den, 1.0)
    xw = (h[0, 0] * xs + h[0, 1] * ys + h[0, 2]) / safe
    yw = (h[1, 0] * xs + h[1, 1] * ys + h[1, 2]) / safe
    return xw, yw, ok


def warp_image(src, h):
    """Resample src so that output pixel (u,v) reads src at H(u,v,1).

    Out-of-bounds or masked samples come back with mask False and value 0.
    """
    if abs(np.linalg.det(h)) < 1e-15:
        raise DegenerateGeometryError("homography is singular")
    hh, ww = src.shape
    ys, xs = np.mgrid[0:hh, 0:ww].astype(np.float64)
    xw, yw, ok = _apply_homography(h, xs, ys)
    vals, valid = B.bilinear_sample(src.data, src.mask, xw, yw)
    valid = valid & ok
    return GrayImage(np.where(valid, vals, 0.0).astype(np.float32), valid)


def warp_patch(src, h, center, side):
    """Warp the side x side window centered at (x,y) in reference coords.

    Same sampling core as warp_image, restricted to one window. Returns
    (values, valid) of shape (side, side).
    """
    cx, cy = center
    half = side // 2
    ys, xs = np.mgrid[cy - half : cy - half + side, cx - half : cx - half + side]
    xw, yw, ok = _apply_homography(h, xs.astype(np.float64), ys.astype(np.float64))
    vals, valid = B.bilinear_sample(src.data, src.mask, xw, yw)
    valid = valid & ok
    return np.where(valid, vals, 0.0).astype(np.float32), valid


def backproject(cam, pixel, depth):
    """Pixel (u,v) at a camera-frame depth -> world point."""
    if depth <= 0:
        raise ValueError("depth must be positive")
    u, v = pixel
    ray = cam.intr.inverse() @ np.array([u, v, 1.0])
    x_cam = depth * ray
    return cam.pose.r.T @ (x_cam - cam.pose.t)


def project(cam, point):
    """World point -> pixel (u,v); raises if the point is behind the camera."""
    x_cam = cam.pose.r @ np.asarray(point, dtype=np.float64) + cam.pose.t
    if x_cam[2] <= 0:
        raise BehindCameraError(f"point at camera z={x_cam[2]:.4g}")
    return np.array(
        [
            cam.intr.fx * x_cam[0] / x_cam[2] + cam.intr.cx,
            cam.intr.fy * x_cam[1] / x_cam[2] + cam.intr.cy,
        ]
    )


def lift_depth_map(cam, depth, mask=None):
    """Depth map (+ optional validity mask) -> world-frame point cloud (N,3)."""
    hh, ww = depth.shape
    if mask is None:
        mask = depth > 0
    ys, xs = np.nonzero(mask)
    d = depth[ys, xs].astype(np.float64)
    kinv = cam.intr.inverse()
    rays = kinv @ np.stack([xs, ys, np.ones_like(xs)]).astype(np.float64)
    x_cam = rays * d
    return (cam.pose.r.T @ (x_cam - cam.pose.t[:, None])).T


def look_at_pose(eye, target, down=(0.0, 1.0, 0.0)):
    """World-to-camera pose for a camera at eye looking toward target.

    Camera axes: +x right, +y down, +z forward; ``down`` is the world
    direction the image y axis should roughly follow (+y by default, i.e.
    the frame of an identity-pose reference camera).
    """
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    nf = np.linalg.norm(fwd)
    if nf < 1e-12:
        raise ValueError("eye and target coincide")
    fwd = fwd / nf
    right = np.cross(np.asarray(down, dtype=np.float64), fwd)
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        raise ValueError("down direction parallel to view direction")
    right /= nr
    dn = np.cross(fwd, right)
    r = np.stack([right, dn, fwd])
    return Pose(r, -r @ eye)
