import math

import numpy as np
import pytest

from avatarforge.autodiff import NonFiniteError, Tape, Tensor, backward, grad_check, tensor
from avatarforge.discriminator import (
    DiscConfig,
    d_loss,
    disc_param_names,
    discriminate,
    features,
    g_loss,
    init_discriminator,
    r1_penalty,
)

CFG = DiscConfig()
TINY = DiscConfig(image_size=8, channels=(4, 6), feature_dim=5)


def _params(config, seed=0, dtype=np.float32):
    params = init_discriminator(config, np.random.default_rng(seed))
    return {k: v.astype(dtype) for k, v in params.items()}


def _batch(config, seed=1, n=3, dtype=np.float32):
    rng = np.random.default_rng(seed)
    images = rng.random((n, config.in_channels, config.image_size,
                         config.image_size)).astype(dtype)
    labels = np.zeros((n, config.label_dim), dtype)
    for i in range(n):
        hot = rng.integers(0, config.label_dim, 2)
        labels[i, hot] = 1.0
    return images, labels


class TestConfig:
    def test_param_names_cover_init(self):
        assert set(disc_param_names(TINY)) == set(_params(TINY))

    def test_negative_gamma_rejected(self):
        with pytest.raises(ValueError):
            DiscConfig(r1_gamma=-0.1)

    def test_indivisible_image_size_rejected(self):
        with pytest.raises(ValueError):
            DiscConfig(image_size=10, channels=(4, 6, 8))


class TestDiscriminate:
    def test_zero_image_zero_weights_gives_phi_bias(self):
        params = {k: np.zeros_like(v) for k, v in _params(TINY).items()}
        params["phi.b"] = np.array([0.7], np.float32)
        images = np.zeros((4, 3, 8, 8), np.float32)
        labels = np.zeros((4, 60), np.float32)
        labels[:, 5] = 1.0
        logits = discriminate(params, images, labels, TINY).numpy()
        np.testing.assert_array_equal(logits, np.full(4, 0.7, np.float32))

    def test_zero_label_projects_to_exactly_zero(self):
        images, _ = _batch(TINY)
        zero = np.zeros((3, 60), np.float32)
        base = _params(TINY)
        swapped = dict(base)
        swapped["psi.w"] = base["psi.w"][::-1].copy() * 3.0
        a = discriminate(base, images, zero, TINY).numpy()
        b = discriminate(swapped, images, zero, TINY).numpy()
        np.testing.assert_array_equal(a, b)

    def test_phi_pathway_unchanged_with_psi_zeroed(self):
        params = _params(TINY)
        params["psi.w"] = np.zeros_like(params["psi.w"])
        images, labels = _batch(TINY)
        zero = np.zeros_like(labels)
        a = discriminate(params, images, labels, TINY).numpy()
        b = discriminate(params, images, zero, TINY).numpy()
        np.testing.assert_array_equal(a, b)

    def test_label_dim_mismatch_raises(self):
        images, _ = _batch(TINY)
        with pytest.raises(ValueError):
            discriminate(_params(TINY), images, np.zeros((3, 59), np.float32), TINY)

    def test_image_shape_mismatch_raises(self):
        _, labels = _batch(TINY)
        with pytest.raises(ValueError):
            discriminate(_params(TINY), np.zeros((3, 3, 7, 8), np.float32),
                         labels, TINY)

    def test_feature_width(self):
        images, _ = _batch(TINY, n=2)
        h = features(_params(TINY), images, TINY)
        assert h.shape == (2, TINY.feature_dim)

    def test_gradcheck_64bit(self):
        config = DiscConfig(image_size=4, channels=(2,), feature_dim=3)
        params = _params(config, seed=3, dtype=np.float64)
        rng = np.random.default_rng(4)
        image0 = rng.random((1, 3, 4, 4))
        labels = np.zeros((1, 60))
        labels[0, [20, 47]] = 1.0
        checked = ["conv0.w", "head.w", "phi.w", "psi.w"]

        def f(img, *ws):
            p = dict(params)
            p.update(zip(checked, ws))
            return discriminate(p, img, labels, config).sum()

        assert grad_check(f, [image0] + [params[k] for k in checked]) < 1e-6


class TestGLoss:
    def test_zero_logit_gives_ln2(self):
        val = float(g_loss(tensor(np.zeros(4, np.float64))).numpy())
        assert math.isclose(val, math.log(2.0), rel_tol=1e-12)

    def test_large_logit_tail_vanishes(self):
        assert float(g_loss(tensor(np.array([60.0]))).numpy()) < 1e-9

    def test_monotone_decreasing(self):
        grid = np.linspace(-6.0, 6.0, 25)
        vals = [float(g_loss(tensor(np.array([v]))).numpy()) for v in grid]
        assert all(a > b for a, b in zip(vals, vals[1:]))


class TestDLoss:
    def test_zero_discriminator(self):
        params = {k: np.zeros_like(v) for k, v in _params(TINY).items()}
        reals, rl = _batch(TINY, seed=5)
        fakes, fl = _batch(TINY, seed=6)
        loss, stats = d_loss(params, reals, rl, fakes, fl, TINY)
        assert math.isclose(float(loss.numpy()), 2.0 * math.log(2.0), rel_tol=1e-6)
        assert stats["r1"] == 0.0

    def test_gamma_zero_is_pure_nonsaturating(self):
        params = _params(TINY)
        reals, rl = _batch(TINY, seed=5)
        fakes, fl = _batch(TINY, seed=6)
        loss, stats = d_loss(params, reals, rl, fakes, fl, TINY, gamma=0.0)
        rlog = discriminate(params, reals, rl, TINY).numpy()
        flog = discriminate(params, fakes, fl, TINY).numpy()
        want = np.logaddexp(0.0, flog).mean() + np.logaddexp(0.0, -rlog).mean()
        assert math.isclose(float(loss.numpy()), float(want), rel_tol=1e-6)
        assert stats["r1"] == 0.0

    def test_r1_linear_map_closed_form(self):
        # conv of all-ones kernel + identity heads realizes D(x) = 0.5 * sum(x)
        # on positive images, so grad_x = 0.5 everywhere and ||a||^2 = 1.0
        config = DiscConfig(image_size=2, in_channels=1, channels=(1,),
                            feature_dim=1, r1_gamma=3.0)
        params = {
            "conv0.w": np.ones((1, 1, 3, 3), np.float32),
            "conv0.b": np.zeros(1, np.float32),
            "head.w": np.ones((1, 1), np.float32),
            "head.b": np.zeros(1, np.float32),
            "phi.w": np.full((1, 1), 0.5, np.float32),
            "phi.b": np.zeros(1, np.float32),
            "psi.w": np.zeros((60, 1), np.float32),
        }
        reals = np.full((2, 1, 2, 2), 0.25, np.float32)
        labels = np.zeros((2, 60), np.float32)
        assert float(r1_penalty(params, reals, labels, config).numpy()) == 1.0
        fakes = np.full((2, 1, 2, 2), 0.5, np.float32)
        loss, stats = d_loss(params, reals, labels, fakes, labels, config)
        assert stats["r1"] == 1.0
        gan = np.logaddexp(0.0, 0.5 * 4 * 0.5).astype(np.float32) \
            + np.logaddexp(0.0, -0.5 * 4 * 0.25).astype(np.float32)
        assert math.isclose(float(loss.numpy()),
                            float(gan) + config.r1_gamma / 2.0, rel_tol=1e-6)

    def test_r1_nonnegative(self):
        for seed in range(4):
            params = _params(TINY, seed=seed)
            reals, rl = _batch(TINY, seed=seed + 10)
            assert float(r1_penalty(params, reals, rl, TINY).numpy()) >= 0.0

    def test_batch_permutation_invariance(self):
        params = _params(TINY, dtype=np.float64)
        reals, rl = _batch(TINY, seed=7, n=5, dtype=np.float64)
        fakes, fl = _batch(TINY, seed=8, n=5, dtype=np.float64)
        perm = np.random.default_rng(9).permutation(5)
        a, _ = d_loss(params, reals, rl, fakes, fl, TINY)
        b, _ = d_loss(params, reals[perm], rl[perm], fakes[perm], fl[perm], TINY)
        assert abs(float(a.numpy()) - float(b.numpy())) < 1e-6
        ga = float(g_loss(discriminate(params, fakes, fl, TINY)).numpy())
        gb = float(g_loss(discriminate(params, fakes[perm], fl[perm], TINY)).numpy())
        assert abs(ga - gb) < 1e-6

    def test_finite_for_finite_inputs(self):
        params = _params(TINY, seed=11)
        reals, rl = _batch(TINY, seed=12)
        fakes, fl = _batch(TINY, seed=13)
        loss, stats = d_loss(params, reals, rl, fakes, fl, TINY)
        assert np.isfinite(loss.numpy())
        assert all(np.isfinite(v) for v in stats.values())

    def test_nonfinite_weights_abort(self):
        params = _params(TINY)
        params["conv0.w"] = params["conv0.w"].copy()
        params["conv0.w"][0, 0, 0, 0] = np.inf
        reals, rl = _batch(TINY, seed=5)
        fakes, fl = _batch(TINY, seed=6)
        with pytest.raises(NonFiniteError):
            d_loss(params, reals, rl, fakes, fl, TINY)

    def test_r1_gradient_matches_finite_differences(self):
        # double-backward path vs central differences on a few coordinates
        config = DiscConfig(image_size=4, channels=(2,), feature_dim=3)
        base = _params(config, seed=21, dtype=np.float64)
        reals, rl = _batch(config, seed=22, n=2, dtype=np.float64)
        rl = rl.astype(np.float64)
        checked = ["conv0.w", "head.w", "psi.w"]

        with Tape() as tape:
            ts = {k: Tensor(base[k].copy()) for k in checked}
            for t in ts.values():
                tape.watch(t)
            p = dict(base)
            p.update(ts)
            penalty = r1_penalty(p, reals, rl, config)
            grads = {k: g.numpy() for k, g in
                     zip(checked, backward(penalty, list(ts.values())))}

        h = 1e-5
        rng = np.random.default_rng(23)
        for name in checked:
            flat_idx = rng.integers(0, base[name].size, 3)
            for idx in np.unique(flat_idx):
                pert = dict(base)
                plus = base[name].copy()
                plus.flat[idx] += h
                pert[name] = plus
                fp = float(r1_penalty(pert, reals, rl, config).numpy())
                minus = base[name].copy()
                minus.flat[idx] -= h
                pert[name] = minus
                fm = float(r1_penalty(pert, reals, rl, config).numpy())
                fd = (fp - fm) / (2.0 * h)
                got = grads[name].flat[idx]
                assert abs(got - fd) / (abs(fd) + 1e-8) < 1e-4
