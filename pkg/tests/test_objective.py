import math

import numpy as np
import pytest

from layersplat.objective import (LossConfig, MetricError, crop_border, eval_pair, photometric_loss, psnr, ssim,
                                  ssim_with_grad)


def const(v, shape=(32, 32, 3)):
    return np.full(shape, v)


class TestLoss:
    def test_identical_images(self, rng):
        x = rng.uniform(0, 1, (20, 20, 3))
        loss, g = photometric_loss(x, x)
        assert loss == 0.0
        assert not np.any(g)

    def test_constant_closed_form(self):
        loss, _ = photometric_loss(const(0.2), const(0.8))
        s = (2 * 0.16 + 1e-4) / (0.68 + 1e-4)
        assert loss == pytest.approx(0.15 * 0.6 + 0.85 * (1 - s) / 2, abs=1e-12)
        assert loss == pytest.approx(0.31497, abs=1e-5)

    def test_alpha_zero_is_l1(self, rng):
        a, b = rng.uniform(0, 1, (2, 16, 16, 3))
        loss, _ = photometric_loss(a, b, LossConfig(alpha=0.0))
        assert loss == np.mean(np.abs(a - b))

    def test_gradient_matches_finite_differences(self, rng):
        a, b = rng.uniform(0, 1, (2, 16, 16, 3))
        _, g = photometric_loss(a, b)
        h = 1e-6
        idx = [tuple(rng.integers(0, 16, 2)) + (int(rng.integers(0, 3)),) for _ in range(40)]
        for i in idx:
            p, m = a.copy(), a.copy()
            p[i] += h
            m[i] -= h
            fd = (photometric_loss(p, b)[0] - photometric_loss(m, b)[0]) / (2 * h)
            assert abs(fd - g[i]) <= 1e-5 * max(abs(g[i]), np.abs(g).max() * 1e-2)

    def test_non_negative(self, rng):
        for _ in range(10):
            a, b = rng.uniform(0, 1, (2, 16, 16, 3))
            assert photometric_loss(a, b)[0] > 0

    def test_invalid_config(self):
        with pytest.raises(MetricError):
            LossConfig(alpha=1.5)
        with pytest.raises(MetricError):
            LossConfig(ssim_window=4)


class TestSsim:
    def test_identical(self, rng):
        x = rng.uniform(0, 1, (20, 20, 3))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_constant_closed_form(self):
        assert ssim(const(0.2), const(0.8)) == pytest.approx(0.47066, abs=1e-5)
        assert ssim(const(0.0), const(1.0)) == pytest.approx(1e-4 / (1 + 1e-4), rel=1e-9)

    def test_symmetric(self, rng):
        a, b = rng.uniform(0, 1, (2, 24, 24, 3))
        assert abs(ssim(a, b) - ssim(b, a)) < 1e-12

    def test_grad_value_agrees(self, rng):
        a, b = rng.uniform(0, 1, (2, 16, 16, 3))
        s, _ = ssim_with_grad(a, b)
        assert s == ssim(a, b)

    def test_too_small(self):
        with pytest.raises(MetricError):
            ssim(const(0.1, (8, 8, 3)), const(0.2, (8, 8, 3)))


class TestPsnr:
    def test_closed_forms(self):
        assert psnr(const(0.5), const(0.5)) == math.inf
        assert psnr(const(0.5), const(0.6)) == pytest.approx(20.0, abs=1e-9)
        assert psnr(const(0.5), const(0.51)) == pytest.approx(40.0, abs=1e-9)

    def test_monotone(self):
        vals = [psnr(const(0.5), const(0.5 + e)) for e in (0.2, 0.1, 0.05, 0.01)]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_shape_mismatch(self):
        with pytest.raises(MetricError):
            psnr(const(0.1, (4, 4, 3)), const(0.1, (4, 5, 3)))


class TestEvalPair:
    def test_crop_region(self):
        assert crop_border(np.zeros((256, 384, 3)), 0.05).shape[:2] == (232, 346)
        rep = eval_pair(const(0.2, (256, 384, 3)), const(0.3, (256, 384, 3)))
        assert rep.region == (232, 346)

    def test_no_crop(self, rng):
        a, b = rng.uniform(0, 1, (2, 20, 30, 3))
        rep = eval_pair(a, b, 0.0)
        assert rep.region == (20, 30) and rep.psnr == psnr(a, b)

    def test_identical(self, rng):
        a = rng.uniform(0, 1, (40, 40, 3))
        for c in (0.0, 0.05, 0.2):
            rep = eval_pair(a, a, c)
            assert rep.psnr == math.inf and rep.ssim == pytest.approx(1.0, abs=1e-12)

    def test_invalid(self):
        with pytest.raises(MetricError):
            eval_pair(const(0.1), const(0.2), 0.5)
        with pytest.raises(MetricError):
            eval_pair(const(0.1, (24, 24, 3)), const(0.2, (24, 24, 3)), 0.3)
