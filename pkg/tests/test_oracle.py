import json

import numpy as np
import pytest

from avatarforge.camera import CameraRig, SphericalPose, flip_pose
from avatarforge.oracle import (
    K_SIGMA,
    AvatarSpec,
    MisalignmentModel,
    OracleBackend,
    _max_extent,
    corrupt_pose,
    density_color,
    load_depth,
    load_image,
    load_manifest,
    mirror_spec,
    render,
    render_depth,
    sdf,
    spawn_avatar,
    synth_dataset,
)
from avatarforge.pose_codec import ConfidencePolicy
from avatarforge.prompts import load_tables

RIG = CameraRig()


def _spec(seed=0, style="Anime", attributes=None):
    return spawn_avatar(np.random.default_rng(seed), style, attributes or {})


class TestSpawn:
    def test_deterministic(self):
        a = _spec(7, "Disney", {"Eye Shape": "big-eyed"})
        b = _spec(7, "Disney", {"Eye Shape": "big-eyed"})
        assert a == b

    def test_unknown_style_rejected(self):
        with pytest.raises(ValueError, match="unknown style"):
            _spec(0, "Vaporwave")

    def test_eye_size_modifier_ratio(self):
        big = _spec(3, "Anime", {"Eye Shape": "big-eyed"})
        small = _spec(3, "Anime", {"Eye Shape": "small-eyed"})
        assert big.eye_radius / small.eye_radius == pytest.approx(1.35 / 0.70,
                                                                  rel=1e-9)

    def test_bald_removes_hair(self):
        assert not _spec(1, "Anime", {"Hairstyle": "bald"}).has_hair
        assert _spec(1, "Anime", {"Hairstyle": "long hair"}).has_hair

    def test_eye_color_category_applies(self):
        spec = _spec(2, "Disney", {"Eye Color": "green eyes"})
        assert spec.eye_color == (0.20, 0.60, 0.30)

    def test_mark_category_enables_mark(self):
        assert _spec(2, "Anime", {"Facial Features": "birthmark"}).has_mark
        assert not _spec(2, "Anime", {}).has_mark

    def test_unmapped_category_still_alters_geometry(self):
        plain = _spec(5, "Anime", {})
        moody = _spec(5, "Anime", {"Expression": "scowling"})
        assert plain.head_axes != moody.head_axes

    def test_hundred_specs_inside_unit_sphere(self):
        rng = np.random.default_rng(99)
        tables = load_tables()
        names = list(tables.attributes)
        for _ in range(100):
            style = list(tables.styles)[int(rng.integers(10))]
            picked = rng.choice(len(names), size=5, replace=False)
            attrs = {}
            for idx in picked:
                cats = tables.attributes[names[int(idx)]]
                attrs[names[int(idx)]] = cats[int(rng.integers(len(cats)))]
            spec = spawn_avatar(rng, style, attrs)
            assert _max_extent(spec) <= 0.98 + 1e-12


class TestDensityColor:
    def test_center_density_saturates(self):
        spec = _spec()
        sigma, _ = density_color(spec, np.zeros((1, 3)))
        assert sigma[0] == pytest.approx(K_SIGMA, rel=1e-6)

    def test_far_point_is_empty(self):
        spec = _spec()
        sigma, _ = density_color(spec, np.array([[3.0, 0.0, 0.0]]))
        assert sigma[0] < 1e-6

    def test_zero_crossing_is_half_density(self):
        spec = _spec()
        lo, hi = 0.0, 2.0  # bisect the composite sdf along +z
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if sdf(spec, np.array([[0.0, 0.0, mid]]))[0] < 0:
                lo = mid
            else:
                hi = mid
        sigma, _ = density_color(spec, np.array([[0.0, 0.0, 0.5 * (lo + hi)]]))
        assert sigma[0] == pytest.approx(K_SIGMA / 2.0, rel=1e-4)

    def test_rgb_in_gamut(self):
        spec = _spec(4, "Joker", {"Facial Features": "scar"})
        pts = np.random.default_rng(0).uniform(-1, 1, size=(1000, 3))
        sigma, rgb = density_color(spec, pts)
        assert np.all(sigma >= 0.0)
        assert np.all(rgb >= 0.0) and np.all(rgb <= 1.0)

    def test_continuity_small_step(self):
        spec = _spec()
        p = np.array([[0.1, 0.05, 0.48]])
        s0, c0 = density_color(spec, p)
        s1, c1 = density_color(spec, p + 1e-6)
        assert abs(s1[0] - s0[0]) < 1e-3
        assert np.max(np.abs(c1 - c0)) < 1e-3


class TestRender:
    def test_shape_dtype_range(self):
        image = render(_spec(), SphericalPose(20.0, 10.0), RIG, 16)
        assert image.shape == (3, 32, 32)
        assert image.dtype == np.float32
        assert image.min() >= 0.0 and image.max() <= 1.0

    def test_deterministic(self):
        spec = _spec(8)
        pose = SphericalPose(-50.0, 5.0)
        np.testing.assert_array_equal(render(spec, pose, RIG, 16),
                                      render(spec, pose, RIG, 16))

    def test_corner_pixels_are_background(self):
        spec = _spec()
        image = render(spec, SphericalPose(0.0, 0.0), RIG, 32)
        bg = np.array(spec.background, dtype=np.float32)
        np.testing.assert_allclose(image[:, 0, 0], bg, atol=2e-3)
        np.testing.assert_allclose(image[:, 0, -1], bg, atol=2e-3)

    def test_mirror_equivariance_is_exact(self):
        spec = _spec(11, "Anime", {"Facial Features": "mole"})
        assert spec.has_mark  # asymmetric geometry makes this meaningful
        pose = SphericalPose(37.0, -8.0)
        a = render(spec, pose, RIG, 16)
        b = render(mirror_spec(spec), flip_pose(pose), RIG, 16)
        np.testing.assert_array_equal(a, b[:, :, ::-1])

    def test_style_palettes_separate(self):
        pose = SphericalPose(0.0, 0.0)
        hulk = render(_spec(5, "Hulk"), pose, RIG, 16)
        blue = render(_spec(5, "Avatar"), pose, RIG, 16)
        assert np.linalg.norm(hulk.mean((1, 2)) - blue.mean((1, 2))) > 0.05

    def test_depth_bounds_and_face_proximity(self):
        spec = _spec()
        depth = render_depth(spec, SphericalPose(0.0, 0.0), RIG, 64)
        assert depth.shape == (32, 32)
        assert depth.min() >= RIG.near and depth.max() <= RIG.far
        # face pixels terminate before empty corner rays
        assert depth[16, 16] < depth[0, 0] - 0.3


class TestCorruptPose:
    MODEL = MisalignmentModel(delta_max_deg=20.0, p_flip=0.25)

    def test_confident_view_is_identity(self):
        nominal = SphericalPose(30.0, 10.0)
        assert corrupt_pose(nominal, self.MODEL,
                            np.random.default_rng(0)) == nominal

    def test_degenerate_model_is_identity_everywhere(self):
        model = MisalignmentModel(delta_max_deg=0.0, p_flip=0.0)
        rng = np.random.default_rng(1)
        for yaw in (-170.0, -90.0, 80.0, 150.0):
            nominal = SphericalPose(yaw, -20.0)
            assert corrupt_pose(nominal, model, rng) == nominal

    def test_jitter_bounded(self):
        rng = np.random.default_rng(2)
        model = MisalignmentModel(delta_max_deg=5.0, p_flip=0.0)
        nominal = SphericalPose(90.0, 0.0)
        for _ in range(200):
            true = corrupt_pose(nominal, model, rng)
            assert abs(true.yaw_deg - 90.0) <= 5.0
            assert abs(true.pitch_deg) <= 5.0

    def test_back_flip_rate_monte_carlo(self):
        rng = np.random.default_rng(3)
        model = MisalignmentModel(delta_max_deg=0.0, p_flip=0.3)
        nominal = SphericalPose(170.0, 0.0)
        n = 100_000
        flips = sum(corrupt_pose(nominal, model, rng).yaw_deg != 170.0
                    for _ in range(n))
        assert flips / n == pytest.approx(0.3, abs=0.01)

    def test_side_views_never_flip(self):
        rng = np.random.default_rng(4)
        model = MisalignmentModel(delta_max_deg=0.0, p_flip=1.0)
        nominal = SphericalPose(90.0, 0.0)  # Side, not Back
        for _ in range(50):
            assert corrupt_pose(nominal, model, rng) == nominal

    def test_model_validation(self):
        with pytest.raises(ValueError):
            MisalignmentModel(delta_max_deg=-1.0)
        with pytest.raises(ValueError):
            MisalignmentModel(p_flip=1.5)


class TestSynthDataset:
    def test_flip_doubling_and_round_trip(self, tmp_path):
        manifest = synth_dataset(4, ["Anime"], MisalignmentModel(),
                                 np.random.default_rng(0), tmp_path,
                                 n_samples=8)
        assert manifest["n_total"] == 8
        assert len(manifest["records"]) == 8
        entry = manifest["records"][0]
        image = load_image(tmp_path, entry)
        assert image.shape == (3, 32, 32)
        assert image.min() >= 0.0 and image.max() <= 1.0
        depth = load_depth(tmp_path, entry)
        assert depth.shape == (32, 32)
        assert depth.min() >= RIG.near - 1e-6

    def test_flipped_records_mirror_sources(self, tmp_path):
        manifest = synth_dataset(3, ["Robot"], MisalignmentModel(),
                                 np.random.default_rng(5), tmp_path,
                                 n_samples=8)
        records = manifest["records"]
        for i in range(3):
            src, flip = records[i], records[3 + i]
            assert not src["flipped"] and flip["flipped"]
            assert flip["seed"] == src["seed"]
            assert flip["nominal_pose"]["yaw_deg"] == pytest.approx(
                -src["nominal_pose"]["yaw_deg"], abs=1e-9) or \
                abs(src["nominal_pose"]["yaw_deg"]) == 180.0
            np.testing.assert_array_equal(load_image(tmp_path, flip),
                                          load_image(tmp_path, src)[:, :, ::-1])

    def test_confident_records_have_aligned_poses(self, tmp_path):
        manifest = synth_dataset(12, ["Anime"], MisalignmentModel(),
                                 np.random.default_rng(7), tmp_path,
                                 n_samples=4, write_depth=False)
        policy = ConfidencePolicy()
        for entry in manifest["records"]:
            nominal = SphericalPose.from_json(entry["nominal_pose"])
            if abs(nominal.yaw_deg) <= policy.yaw_box and \
               abs(nominal.pitch_deg) <= policy.pitch_box:
                assert entry["true_pose"] == entry["nominal_pose"]

    def test_rerun_is_byte_identical(self, tmp_path):
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        synth_dataset(3, ["Anime", "Hulk"], MisalignmentModel(),
                      np.random.default_rng(42), a_dir, n_samples=4)
        synth_dataset(3, ["Anime", "Hulk"], MisalignmentModel(),
                      np.random.default_rng(42), b_dir, n_samples=4)
        assert (a_dir / "manifest.json").read_bytes() == \
            (b_dir / "manifest.json").read_bytes()
        for i in range(6):
            name = f"records/rec_{i:06d}.img"
            assert (a_dir / name).read_bytes() == (b_dir / name).read_bytes()

    def test_manifest_entry_schema(self, tmp_path):
        manifest = synth_dataset(1, ["Sci-Fi"], MisalignmentModel(),
                                 np.random.default_rng(1), tmp_path,
                                 n_samples=4, write_depth=False)
        entry = load_manifest(tmp_path)["records"][0]
        assert set(entry) == {"id", "shape", "nominal_pose", "true_pose",
                              "fine_bins", "coarse_bins", "style",
                              "prompt_pos", "prompt_neg", "seed", "flipped"}
        assert entry["fine_bins"]["part"] == "fine"
        assert entry["coarse_bins"]["part"] == "coarse"
        assert 0 <= entry["fine_bins"]["yaw_bin"] < 40
        assert 0 <= entry["coarse_bins"]["yaw_bin"] < 3
        assert manifest["records"][0] == entry

    def test_aligned_dataset_has_no_pose_gap(self, tmp_path):
        aligned = MisalignmentModel(delta_max_deg=0.0, p_flip=0.0)
        manifest = synth_dataset(8, ["Anime"], aligned,
                                 np.random.default_rng(3), tmp_path,
                                 n_samples=4, write_depth=False)
        for entry in manifest["records"]:
            assert entry["true_pose"] == entry["nominal_pose"]

    def test_bad_args_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            synth_dataset(0, ["Anime"], MisalignmentModel(),
                          np.random.default_rng(0), tmp_path)
        with pytest.raises(ValueError):
            synth_dataset(1, [], MisalignmentModel(),
                          np.random.default_rng(0), tmp_path)


class TestOracleBackend:
    def test_repeat_generation_bit_identical(self):
        spec = _spec(6)
        meta = {"avatar": spec, "pose": SphericalPose(10.0, 0.0), "rig": RIG,
                "n_samples": 8}
        backend = OracleBackend()
        a = backend.generate(np.zeros((3, 32, 32), np.float32), meta, None, 1)
        b = backend.generate(np.zeros((3, 32, 32), np.float32), meta, None, 1)
        np.testing.assert_array_equal(a, b)
