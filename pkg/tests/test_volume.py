import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avatarforge.camera import CameraRig, SphericalPose
from avatarforge.volume import (
    composite,
    expected_depth,
    ray_depths,
    ray_points,
    render_field,
    transmittance_weights,
)


class TestRayDepths:
    def test_midpoints(self):
        t, delta = ray_depths(1.0, 3.0, 4)
        np.testing.assert_allclose(t, [1.25, 1.75, 2.25, 2.75])
        assert delta == 0.5

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError):
            ray_depths(1.0, 3.0, 1)

    def test_stratified_stays_in_bins(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            t, delta = ray_depths(1.7, 3.7, 16, rng)
            assert np.all(t >= 1.7) and np.all(t <= 3.7)
            assert np.all(np.floor((t - 1.7) / delta) == np.arange(16))


class TestWeights:
    def test_two_samples_ln2_hand_example(self):
        # alpha = 1/2 each; weights 0.5 and 0.25, residual 0.25
        sigma = np.array([np.log(2.0), np.log(2.0)])
        weights, acc = transmittance_weights(sigma, 1.0)
        np.testing.assert_allclose(weights, [0.5, 0.25], atol=1e-12)
        assert acc == pytest.approx(0.75, abs=1e-12)

    def test_zero_density(self):
        weights, acc = transmittance_weights(np.zeros((5, 4)), 0.3)
        np.testing.assert_array_equal(weights, 0.0)
        np.testing.assert_array_equal(acc, 0.0)

    def test_saturated_sample_takes_all(self):
        weights, acc = transmittance_weights(np.array([1e8, 1.0]), 1.0)
        np.testing.assert_allclose(weights, [1.0, 0.0], atol=1e-12)
        assert acc == pytest.approx(1.0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0.0, 50.0), min_size=1, max_size=8))
    def test_matches_running_product_reference(self, sigmas):
        # independent oracle: T_i as an explicit running product
        sigma = np.array(sigmas)
        delta = 0.125
        weights, acc = transmittance_weights(sigma, delta)
        trans = 1.0
        for i, s in enumerate(sigmas):
            alpha = 1.0 - np.exp(-s * delta)
            assert weights[i] == pytest.approx(trans * alpha, abs=1e-12)
            trans *= 1.0 - alpha
        assert acc == pytest.approx(1.0 - trans, abs=1e-10)
        assert np.all(weights >= 0.0) and 0.0 <= acc <= 1.0 + 1e-12


class TestComposite:
    def test_zero_density_gives_background(self):
        sigma = np.zeros((2, 2, 4))
        rgb = np.ones((2, 2, 4, 3)) * 0.3
        weights, acc = transmittance_weights(sigma, 0.5)
        color = composite(weights, acc, rgb, (0.9, 0.5, 0.1))
        np.testing.assert_allclose(color, np.broadcast_to([0.9, 0.5, 0.1],
                                                          (2, 2, 3)))

    def test_saturated_sample_color(self):
        sigma = np.array([[1e8, 1.0]])
        rgb = np.array([[[0.2, 0.4, 0.6], [0.9, 0.9, 0.9]]])
        weights, acc = transmittance_weights(sigma, 1.0)
        color = composite(weights, acc, rgb, (0.0, 0.0, 0.0))
        np.testing.assert_allclose(color[0], [0.2, 0.4, 0.6], atol=1e-12)

    def test_weights_plus_background_sum_to_one(self):
        rng = np.random.default_rng(4)
        sigma = rng.random((3, 7, 16)) * 5.0
        weights, acc = transmittance_weights(sigma, 0.125)
        total = weights.sum(-1) + (1.0 - acc)
        np.testing.assert_allclose(total, 1.0, atol=1e-6)

    def test_convex_combination_stays_in_gamut(self):
        rng = np.random.default_rng(5)
        sigma = rng.random((4, 8)) * 10.0
        rgb = rng.random((4, 8, 3))
        weights, acc = transmittance_weights(sigma, 0.125)
        color = composite(weights, acc, rgb, (0.5, 0.5, 0.5))
        assert np.all(color >= -1e-9) and np.all(color <= 1.0 + 1e-9)


class TestExpectedDepth:
    def test_empty_space_terminates_at_far(self):
        t, delta = ray_depths(1.7, 3.7, 8)
        weights, acc = transmittance_weights(np.zeros(8), delta)
        assert expected_depth(weights, acc, t, 3.7) == pytest.approx(3.7)

    def test_opaque_wall_reads_wall_depth(self):
        t, delta = ray_depths(1.7, 3.7, 200)
        sigma = np.where(t > 2.7, 1e6, 0.0)
        weights, acc = transmittance_weights(sigma, delta)
        depth = expected_depth(weights, acc, t, 3.7)
        assert depth == pytest.approx(2.7, abs=delta)


class TestRenderField:
    def test_beer_lambert_ball(self):
        # constant-density ball rho=1, R=0.5 via a sharp sigmoid shell; the
        # analytic center-ray transmittance is exp(-rho * chord)
        def field(points):
            d = np.linalg.norm(points, axis=-1) - 0.5
            sigma = 1.0 / (1.0 + np.exp(np.clip(40.0 * d, -60.0, 60.0)))
            return sigma, np.ones(points.shape[:-1] + (3,)) * 0.5

        rig = CameraRig(fx=31.0, fy=31.0, cx=15.0, cy=15.0, width=31, height=31)
        _, acc, _ = render_field(field, SphericalPose(0.0, 0.0, 2.7), rig,
                                 256, (1.0, 1.0, 1.0))
        trans_center = 1.0 - acc[15, 15]
        assert trans_center == pytest.approx(np.exp(-1.0), abs=1e-3)

    def test_zero_field_is_background(self):
        def field(points):
            return np.zeros(len(points)), np.zeros((len(points), 3))

        rig = CameraRig()
        color, acc, depth = render_field(field, SphericalPose(30.0, 5.0), rig,
                                         8, (0.2, 0.3, 0.4))
        np.testing.assert_allclose(color, np.broadcast_to([0.2, 0.3, 0.4],
                                                          (32, 32, 3)))
        np.testing.assert_array_equal(acc, 0.0)
        np.testing.assert_allclose(depth, 3.7)

    def test_points_lie_on_rays(self):
        rig = CameraRig()
        pose = SphericalPose(40.0, -10.0)
        points, t, delta = ray_points(pose, rig, 4)
        assert points.shape == (32, 32, 4, 3)
        from avatarforge.camera import camera_position
        origin = camera_position(pose)
        d = points[5, 7, 2] - origin
        assert np.linalg.norm(d) == pytest.approx(t[2])
