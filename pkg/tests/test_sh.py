import numpy as np
import pytest

from layersplat.sh import (SH_C0, SH_C1, degree_from_basis, eval_sh, eval_sh_unclamped, num_basis, rgb_to_dc,
                           sh_basis, sh_basis_grad)


def unit_dirs(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


class TestEvalSh:
    def test_degree0_constant(self):
        c = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_allclose(eval_sh(c, [0.0, 0.0, 1.0]), SH_C0 * c[0], rtol=1e-15)
        assert SH_C0 == pytest.approx(1 / (2 * np.sqrt(np.pi)), rel=1e-15)
        assert SH_C0 == pytest.approx(0.28209479, abs=1e-8)

    def test_zero_coefficients(self, rng):
        for L in range(4):
            np.testing.assert_array_equal(eval_sh(np.zeros((num_basis(L), 3)), unit_dirs(rng, 1)[0]), 0.0)

    def test_y10_coefficient(self):
        c = np.zeros((4, 3))
        c[2] = 1.0  # (l=1, m=0)
        np.testing.assert_allclose(eval_sh(c, [0.0, 0.0, 1.0]), SH_C1, rtol=1e-15)
        assert SH_C1 == pytest.approx(0.48860251, abs=1e-8)

    def test_clamps_negative(self):
        c = np.zeros((4, 3))
        c[2] = -1.0
        np.testing.assert_array_equal(eval_sh(c, [0.0, 0.0, 1.0]), 0.0)
        assert np.all(eval_sh_unclamped(c, np.array([[0.0, 0.0, 1.0]])) < 0)

    def test_linearity(self, rng):
        d = unit_dirs(rng, 10)
        for L in range(4):
            c1, c2 = rng.normal(size=(2, num_basis(L), 3))
            lhs = eval_sh_unclamped(2.5 * c1 - 0.7 * c2, d)
            rhs = 2.5 * eval_sh_unclamped(c1, d) - 0.7 * eval_sh_unclamped(c2, d)
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_degree0_direction_independent(self, rng):
        c = rng.uniform(0, 1, (1, 3))
        out = np.array([eval_sh(c, d) for d in unit_dirs(rng, 100)])
        assert np.all(out == out[0])

    def test_coefficient_gradient_is_basis(self, rng):
        d = unit_dirs(rng, 1)
        for L in range(4):
            B = num_basis(L)
            c = rng.normal(size=(B, 3))
            h = 1e-6
            for b in range(B):
                e = np.zeros((B, 3))
                e[b, 0] = h
                fd = (eval_sh_unclamped(c + e, d)[0, 0] - eval_sh_unclamped(c - e, d)[0, 0]) / (2 * h)
                basis = sh_basis(d, L)[0, b]
                assert abs(fd - basis) <= 1e-6 * max(abs(basis), 1e-3)

    def test_direction_gradient(self, rng):
        d = unit_dirs(rng, 5)
        h = 1e-6
        for L in range(4):
            g = sh_basis_grad(d, L)
            for k in range(3):
                e = np.zeros(3)
                e[k] = h
                fd = (sh_basis(d + e, L) - sh_basis(d - e, L)) / (2 * h)
                np.testing.assert_allclose(g[:, :, k], fd, atol=1e-7)

    def test_rejects_bad_input(self):
        with pytest.raises(ValueError):
            eval_sh(np.zeros((1, 3)), [0.0, 0.0, 2.0])
        with pytest.raises(ValueError):
            eval_sh(np.full((1, 3), np.nan), [0.0, 0.0, 1.0])
        with pytest.raises(ValueError):
            num_basis(4)
        with pytest.raises(ValueError):
            degree_from_basis(5)

    def test_rgb_round_trip(self):
        rgb = np.array([0.2, 0.5, 0.9])
        np.testing.assert_allclose(eval_sh(rgb_to_dc(rgb)[None], [1.0, 0.0, 0.0]), rgb, rtol=1e-15)
