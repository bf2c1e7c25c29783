import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avatarforge.camera import (
    CameraRig,
    SphericalPose,
    camera_position,
    extrinsics,
    flip_pose,
    normalize_yaw,
    pixel_directions,
    rays,
    sample_pose,
)

poses = st.builds(
    SphericalPose,
    yaw_deg=st.floats(-180.0, 179.99),
    pitch_deg=st.floats(-30.0, 30.0),
    radius=st.floats(1.0, 5.0),
)


class TestPose:
    def test_yaw_normalized_into_half_open_range(self):
        assert SphericalPose(180.0, 0.0).yaw_deg == -180.0
        assert SphericalPose(-180.0, 0.0).yaw_deg == -180.0
        assert SphericalPose(540.0, 0.0).yaw_deg == -180.0
        assert SphericalPose(370.0, 0.0).yaw_deg == pytest.approx(10.0)

    def test_pitch_bounds_enforced(self):
        with pytest.raises(ValueError):
            SphericalPose(0.0, 30.1)
        with pytest.raises(ValueError):
            SphericalPose(0.0, -31.0)
        SphericalPose(0.0, 30.0)
        SphericalPose(0.0, -30.0)

    def test_radius_must_be_positive(self):
        with pytest.raises(ValueError):
            SphericalPose(0.0, 0.0, radius=0.0)

    def test_json_round_trip(self):
        p = SphericalPose(33.0, -12.5, 2.7)
        q = SphericalPose.from_json(json.loads(json.dumps(p.to_json())))
        assert q == p

    def test_normalize_yaw_examples(self):
        assert normalize_yaw(0.0) == 0.0
        assert normalize_yaw(180.0) == -180.0
        assert normalize_yaw(-190.0) == pytest.approx(170.0)
        assert normalize_yaw(720.0) == 0.0


class TestExtrinsics:
    def test_front_pose_sits_on_positive_z(self):
        mat = extrinsics(SphericalPose(0.0, 0.0, 2.7))
        np.testing.assert_allclose(mat[:3, 3], [0.0, 0.0, 2.7], atol=1e-12)
        # camera looks along -z_cam toward origin, so z_cam is +z world
        np.testing.assert_allclose(mat[:3, 2], [0.0, 0.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(mat[3], [0.0, 0.0, 0.0, 1.0], atol=0)

    def test_side_pose_sits_on_positive_x(self):
        mat = extrinsics(SphericalPose(90.0, 0.0, 2.0))
        np.testing.assert_allclose(mat[:3, 3], [2.0, 0.0, 0.0], atol=1e-12)

    def test_pitch_raises_camera(self):
        mat = extrinsics(SphericalPose(0.0, 30.0, 2.0))
        assert mat[1, 3] == pytest.approx(2.0 * np.sin(np.deg2rad(30.0)))
        assert mat[1, 3] == pytest.approx(1.0)

    def test_camera_position_matches_translation(self):
        pose = SphericalPose(47.0, -12.0, 3.1)
        np.testing.assert_allclose(camera_position(pose), extrinsics(pose)[:3, 3])

    @settings(max_examples=50, deadline=None)
    @given(poses)
    def test_rotation_is_orthonormal_right_handed(self, pose):
        rot = extrinsics(pose)[:3, :3]
        np.testing.assert_allclose(rot.T @ rot, np.eye(3), atol=1e-6)
        assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(poses)
    def test_up_vector_never_inverted(self, pose):
        # y_cam keeps a non-negative world-up component for |pitch| <= 30
        rot = extrinsics(pose)[:3, :3]
        assert rot[1, 1] > 0.0


class TestRays:
    def test_directions_are_unit(self):
        _, dirs = rays(SphericalPose(35.0, 10.0), CameraRig())
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=-1), 1.0, atol=1e-6)

    def test_principal_pixel_looks_at_origin(self):
        # odd-sized rig puts the principal point on a pixel center
        rig = CameraRig(fx=31.0, fy=31.0, cx=15.0, cy=15.0, width=31, height=31)
        pose = SphericalPose(123.0, -20.0, 2.7)
        origin, dirs = rays(pose, rig)
        center = dirs[15, 15]
        to_origin = -origin / np.linalg.norm(origin)
        np.testing.assert_allclose(center, to_origin, atol=1e-6)

    def test_corner_pixel_angle(self):
        # fx = width: half-diagonal offset from center is ((w-1)/2)/fx in x,y
        rig = CameraRig(fx=32.0, fy=32.0, cx=15.5, cy=15.5, width=32, height=32)
        dirs = pixel_directions(rig)
        expect = np.array([-15.5 / 32.0, 15.5 / 32.0, -1.0])
        expect /= np.linalg.norm(expect)
        np.testing.assert_allclose(dirs[0, 0], expect, atol=1e-6)

    def test_origin_is_camera_position(self):
        pose = SphericalPose(-66.0, 5.0, 2.4)
        origin, _ = rays(pose, CameraRig())
        np.testing.assert_allclose(origin, camera_position(pose))

    def test_image_x_increases_with_pixel_column(self):
        # at the front pose the camera sits at +z looking toward the origin
        # with up +y, so its right vector is world +x
        _, dirs = rays(SphericalPose(0.0, 0.0), CameraRig())
        assert dirs[16, 31][0] > dirs[16, 0][0]

    def test_rig_validation(self):
        with pytest.raises(ValueError):
            CameraRig(near=2.0, far=1.0)
        with pytest.raises(ValueError):
            CameraRig(fx=0.0)

    def test_rig_json_round_trip(self):
        rig = CameraRig()
        assert CameraRig.from_json(json.loads(json.dumps(rig.to_json()))) == rig


class TestFlip:
    def test_involution(self):
        pose = SphericalPose(37.0, -8.0, 2.7)
        assert flip_pose(flip_pose(pose)) == pose

    def test_front_is_fixed_point(self):
        pose = SphericalPose(0.0, 12.0)
        assert flip_pose(pose) == pose

    def test_back_edge_maps_to_itself(self):
        # -180 flips to +180 which normalizes back to -180
        pose = SphericalPose(-180.0, 0.0)
        assert flip_pose(pose).yaw_deg == -180.0

    @settings(max_examples=50, deadline=None)
    @given(poses)
    def test_flip_negates_yaw(self, pose):
        flipped = flip_pose(pose)
        assert flipped.pitch_deg == pose.pitch_deg
        if pose.yaw_deg != -180.0:
            assert flipped.yaw_deg == pytest.approx(-pose.yaw_deg, abs=1e-9)


class TestSamplePose:
    def test_deterministic_under_seed(self):
        a = sample_pose(np.random.default_rng(7))
        b = sample_pose(np.random.default_rng(7))
        assert a == b

    def test_degenerate_range_hits_the_point(self):
        pose = sample_pose(np.random.default_rng(0), yaw_range=(10.0, 10.0),
                           pitch_range=(-5.0, -5.0))
        assert pose.yaw_deg == 10.0
        assert pose.pitch_deg == -5.0

    def test_consumes_two_draws_even_when_degenerate(self):
        rng1 = np.random.default_rng(3)
        rng2 = np.random.default_rng(3)
        sample_pose(rng1, yaw_range=(0.0, 0.0), pitch_range=(0.0, 0.0))
        sample_pose(rng2)
        assert rng1.random() == rng2.random()

    def test_empty_range_rejected(self):
        with pytest.raises(ValueError):
            sample_pose(np.random.default_rng(0), yaw_range=(10.0, 5.0))

    def test_yaw_mean_near_zero(self):
        rng = np.random.default_rng(2024)
        yaws = [sample_pose(rng).yaw_deg for _ in range(100_000)]
        assert abs(float(np.mean(yaws))) < 2.0

    def test_samples_respect_bounds(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            pose = sample_pose(rng, yaw_range=(-40.0, 40.0), pitch_range=(0.0, 10.0))
            assert -40.0 <= pose.yaw_deg <= 40.0
            assert 0.0 <= pose.pitch_deg <= 10.0
