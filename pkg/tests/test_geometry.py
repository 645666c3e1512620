"""Cameras, depth planes, homographies, and warping."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpsim.geometry import (
    BehindCameraError,
    Camera,
    DegenerateGeometryError,
    DepthRange,
    GrayImage,
    Intrinsics,
    Pose,
    backproject,
    depth_planes,
    lift_depth_map,
    look_at_pose,
    plane_homography,
    project,
    warp_image,
    warp_patch,
)


def make_cam(fx=200.0, cx=50.0, cy=40.0, r=None, t=None):
    return Camera(
        Intrinsics(fx, fx, cx, cy),
        Pose(np.eye(3) if r is None else r, np.zeros(3) if t is None else np.asarray(t, float)),
    )


class TestDepthPlanes:
    def test_two_planes_are_endpoints(self):
        d = depth_planes(DepthRange(0.45, 1.0, 2))
        np.testing.assert_allclose(d, [0.45, 1.0], rtol=1e-12)

    def test_three_plane_midpoint(self):
        d = depth_planes(DepthRange(0.5, 1.0, 3))
        assert d[1] == pytest.approx(2.0 / 3.0, rel=1e-12)

    def test_disparity_uniform_256(self):
        d = depth_planes(DepthRange(0.45, 1.0, 256))
        assert len(d) == 256
        assert d[0] == pytest.approx(0.45, abs=1e-15)
        assert d[-1] == pytest.approx(1.0, abs=1e-15)
        steps = np.diff(1.0 / d)
        assert np.abs(steps - steps[0]).max() < 1e-12
        assert np.all(np.diff(d) > 0)  # increasing depth, decreasing disparity

    def test_range_validation(self):
        with pytest.raises(ValueError):
            DepthRange(1.0, 0.5, 8)
        with pytest.raises(ValueError):
            DepthRange(-0.1, 0.5, 8)
        with pytest.raises(ValueError):
            DepthRange(0.1, 0.5, 1)


class TestPoseValidation:
    def test_non_orthonormal_rejected(self):
        r = np.eye(3)
        r[0, 1] = 1e-6
        with pytest.raises(ValueError, match="orthonormal"):
            Pose(r, np.zeros(3))

    def test_reflection_rejected(self):
        r = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(ValueError, match="determinant"):
            Pose(r, np.zeros(3))

    def test_focal_positive(self):
        with pytest.raises(ValueError):
            Intrinsics(-1.0, 1.0, 0.0, 0.0)


class TestPlaneHomography:
    def test_identical_cameras_identity(self):
        cam = make_cam()
        for depth in (0.2, 0.7, 5.0):
            h = plane_homography(cam, cam, depth)
            np.testing.assert_allclose(h, np.eye(3), atol=1e-12)

    def test_pure_translation_shift(self):
        ref = make_cam()
        tx = 0.1
        # src camera center at (tx,0,0): world-to-camera translation is -C
        src = make_cam(t=[-tx, 0.0, 0.0])
        depth = 0.8
        h = plane_homography(ref, src, depth)
        # fronto-parallel plane: pure horizontal pixel shift of fx*tx/depth
        shift = ref.intr.fx * tx / depth
        expected = np.eye(3)
        expected[0, 2] = -shift
        np.testing.assert_allclose(h, expected, atol=1e-9)

    def test_projection_oracle_on_pixel_grid(self, rng):
        # H must agree with project(src, plane_point(backproject(ref,...)))
        ref = make_cam()
        for _ in range(5):
            src = Camera(
                Intrinsics(180.0, 185.0, 48.0, 42.0),
                look_at_pose(rng.uniform(-0.2, 0.2, 3) * [1, 1, 0], (0.0, 0.0, 0.7)),
            )
            depth = float(rng.uniform(0.4, 1.2))
            h = plane_homography(ref, src, depth)
            for u in np.linspace(0, 100, 5):
                for v in np.linspace(0, 80, 5):
                    point = backproject(ref, (u, v), depth)
                    direct = project(src, point)
                    hp = h @ np.array([u, v, 1.0])
                    np.testing.assert_allclose(hp[:2] / hp[2], direct, atol=1e-9)

    def test_forward_backward_compose_to_identity(self):
        # pure-translation rig: the plane z=d in the reference frame is the
        # plane z=d-tz in the source frame, so both directions are
        # fronto-parallel and the two maps must compose to the identity
        ref = make_cam()
        tz = 0.08
        src = make_cam(t=[-0.12, 0.05, -tz])
        d = 0.75
        h_fwd = plane_homography(ref, src, d)
        h_bwd = plane_homography(src, ref, d - tz)
        comp = h_bwd @ h_fwd
        comp /= comp[2, 2]
        np.testing.assert_allclose(comp, np.eye(3), atol=1e-9)

    def test_general_rig_inverse_map(self, rng):
        ref = make_cam()
        src = Camera(
            Intrinsics(210.0, 210.0, 50.0, 40.0),
            look_at_pose((0.15, -0.1, 0.0), (0.0, 0.0, 0.6)),
        )
        h1 = plane_homography(ref, src, 0.75)
        pix = np.array([30.0, 20.0, 1.0])
        back = np.linalg.inv(h1) @ (h1 @ pix)
        np.testing.assert_allclose(back / back[2], pix, atol=1e-9)

    def test_degenerate_plane_flagged(self):
        ref = make_cam()
        # src camera sits on the plane z = 0.5 (center at z=0.5)
        src = make_cam(t=[0.0, 0.0, -0.5])
        with pytest.raises(DegenerateGeometryError):
            plane_homography(ref, src, 0.5)

    def test_nonpositive_depth_rejected(self):
        cam = make_cam()
        with pytest.raises(ValueError):
            plane_homography(cam, cam, 0.0)


class TestWarping:
    def test_identity_warp(self, rng):
        img = GrayImage.full(rng.random((40, 50), dtype=np.float32))
        out = warp_image(img, np.eye(3))
        np.testing.assert_array_equal(out.data, img.data)
        assert out.mask.all()

    def test_integer_shift_exact_copy(self, rng):
        img = GrayImage.full(rng.random((30, 30), dtype=np.float32))
        h = np.eye(3)
        h[0, 2] = 5.0  # out(u,v) = src(u+5, v)
        out = warp_image(img, h)
        np.testing.assert_array_equal(out.data[:, :25], img.data[:, 5:])
        assert out.mask[:, :25].all()
        assert not out.mask[:, 25:].any()
        np.testing.assert_array_equal(out.data[:, 25:], 0.0)

    def test_roundtrip_on_smooth_image(self):
        ys, xs = np.mgrid[0:64, 0:64] / 64.0
        img = GrayImage.full((0.3 + 0.4 * xs + 0.2 * ys).astype(np.float32))
        h = np.array([[1.02, 0.015, -1.3], [-0.01, 0.98, 2.1], [1e-5, -2e-5, 1.0]])
        once = warp_image(img, h)
        back = warp_image(once, np.linalg.inv(h))
        interior = back.mask.copy()
        interior[:4] = interior[-4:] = False
        interior[:, :4] = interior[:, -4:] = False
        err = np.abs(back.data - img.data)[interior]
        assert err.max() <= 0.02

    def test_singular_homography_rejected(self, rng):
        img = GrayImage.full(rng.random((10, 10), dtype=np.float32))
        h = np.eye(3)
        h[2, 2] = 0.0
        h[0, 0] = 0.0
        h[1, 1] = 0.0
        with pytest.raises(DegenerateGeometryError):
            warp_image(img, h)

    def test_warp_preserves_intensity_bounds(self, rng):
        img = GrayImage.full(rng.random((32, 32), dtype=np.float32))
        h = np.array([[0.97, 0.05, 1.0], [-0.04, 1.03, -0.7], [1e-4, -1e-4, 1.0]])
        out = warp_image(img, h)
        assert out.data.min() >= 0.0
        assert out.data.max() <= 1.0 + 1e-6

    def test_warp_patch_matches_warp_image_window(self, rng):
        # training patches must travel the same code path as the sweep
        img = GrayImage.full(rng.random((60, 60), dtype=np.float32))
        h = np.array([[1.01, 0.02, -2.2], [0.015, 0.99, 1.4], [2e-5, 1e-5, 1.0]])
        full = warp_image(img, h)
        vals, ok = warp_patch(img, h, (30, 28), 32)
        np.testing.assert_array_equal(vals, full.data[12:44, 14:46])
        np.testing.assert_array_equal(ok, full.mask[12:44, 14:46])


class TestProjection:
    def test_principal_point_backprojects_on_axis(self):
        cam = make_cam()
        p = backproject(cam, (cam.intr.cx, cam.intr.cy), 0.8)
        np.testing.assert_allclose(p, [0.0, 0.0, 0.8], atol=1e-12)

    def test_roundtrip_random_grid(self, rng):
        cam = Camera(
            Intrinsics(300.0, 280.0, 64.0, 60.0),
            look_at_pose((0.1, -0.05, -0.02), (0.0, 0.0, 0.7)),
        )
        for _ in range(50):
            pix = rng.uniform(0, 128, 2)
            depth = float(rng.uniform(0.3, 2.0))
            back = project(cam, backproject(cam, pix, depth))
            np.testing.assert_allclose(back, pix, atol=1e-9)

    def test_behind_camera_flagged(self):
        cam = make_cam()
        with pytest.raises(BehindCameraError):
            project(cam, (0.0, 0.0, -0.5))

    def test_nonpositive_depth_rejected(self):
        cam = make_cam()
        with pytest.raises(ValueError):
            backproject(cam, (0.0, 0.0), -0.1)

    def test_lifted_depths_stay_in_range(self, rng):
        cam = make_cam(fx=240.0, cx=47.5, cy=47.5)
        depth = rng.uniform(0.45, 1.0, (96, 96)).astype(np.float32)
        pts = lift_depth_map(cam, depth)
        z = pts @ cam.pose.r[2] + cam.pose.t[2]
        assert z.min() >= 0.45 - 1e-6
        assert z.max() <= 1.0 + 1e-6


@given(
    st.floats(min_value=0.05, max_value=5.0),
    st.floats(min_value=1.05, max_value=4.0),
    st.integers(min_value=2, max_value=300),
)
@settings(max_examples=40, deadline=None)
def test_depth_planes_property(z_min, factor, count):
    rng_ = DepthRange(z_min, z_min * factor, count)
    d = depth_planes(rng_)
    assert d[0] == pytest.approx(z_min, rel=1e-12)
    assert d[-1] == pytest.approx(z_min * factor, rel=1e-12)
    inv_steps = np.diff(1.0 / d)
    assert np.all(np.abs(inv_steps - inv_steps[0]) <= 1e-9 * abs(inv_steps[0]) + 1e-15)
