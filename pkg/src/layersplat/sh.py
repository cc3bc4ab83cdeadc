"""Real spherical harmonics up to degree 3 for view-dependent colour.

Coefficients are laid out basis-major: an array of shape ``(..., (L+1)**2, 3)``
where the basis index runs over ``l = 0..L`` and ``m = -l..l``.
"""

from __future__ import annotations

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)

MAX_DEGREE = 3


def num_basis(degree: int) -> int:
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"SH degree must be in [0, {MAX_DEGREE}], got {degree}")
    return (degree + 1) ** 2


def degree_from_basis(n: int) -> int:
    L = int(round(np.sqrt(n))) - 1
    if (L + 1) ** 2 != n or not 0 <= L <= MAX_DEGREE:
        raise ValueError(f"{n} is not a valid SH basis count")
    return L


def rgb_to_dc(rgb):
    """DC coefficient that evaluates to ``rgb`` in every direction."""
    return np.asarray(rgb, dtype=np.float64) / SH_C0


def sh_basis(dirs, degree: int) -> np.ndarray:
    """Basis values ``Y_lm(dir)`` for directions ``(N, 3)`` -> ``(N, (L+1)^2)``."""
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = [np.full_like(x, SH_C0)]
    if degree >= 1:
        out += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out += [SH_C2[0] * x * y, SH_C2[1] * y * z, SH_C2[2] * (2 * zz - xx - yy),
                SH_C2[3] * x * z, SH_C2[4] * (xx - yy)]
    if degree >= 3:
        out += [SH_C3[0] * y * (3 * xx - yy), SH_C3[1] * x * y * z,
                SH_C3[2] * y * (4 * zz - xx - yy), SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
                SH_C3[4] * x * (4 * zz - xx - yy), SH_C3[5] * z * (xx - yy),
                SH_C3[6] * x * (xx - 3 * yy)]
    return np.stack(out, axis=1)


def sh_basis_grad(dirs, degree: int) -> np.ndarray:
    """Partial derivatives of each basis polynomial w.r.t. (x, y, z): ``(N, B, 3)``.

    The components are treated as independent; callers chain through the
    direction normalization themselves.
    """
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    zero = np.zeros_like(x)
    g = [(zero, zero, zero)]
    if degree >= 1:
        c = SH_C1
        g += [(zero, -c + zero, zero), (zero, zero, c + zero), (-c + zero, zero, zero)]
    if degree >= 2:
        c = SH_C2
        g += [(c[0] * y, c[0] * x, zero),
              (zero, c[1] * z, c[1] * y),
              (-2 * c[2] * x, -2 * c[2] * y, 4 * c[2] * z),
              (c[3] * z, zero, c[3] * x),
              (2 * c[4] * x, -2 * c[4] * y, zero)]
    if degree >= 3:
        c = SH_C3
        xx, yy, zz = x * x, y * y, z * z
        g += [(6 * c[0] * x * y, c[0] * (3 * xx - 3 * yy), zero),
              (c[1] * y * z, c[1] * x * z, c[1] * x * y),
              (-2 * c[2] * x * y, c[2] * (4 * zz - xx - 3 * yy), 8 * c[2] * y * z),
              (-6 * c[3] * x * z, -6 * c[3] * y * z, c[3] * (6 * zz - 3 * xx - 3 * yy)),
              (c[4] * (4 * zz - 3 * xx - yy), -2 * c[4] * x * y, 8 * c[4] * x * z),
              (2 * c[5] * x * z, -2 * c[5] * y * z, c[5] * (xx - yy)),
              (c[6] * (3 * xx - 3 * yy), -6 * c[6] * x * y, zero)]
    return np.stack([np.stack(t, axis=-1) for t in g], axis=1)


def eval_sh_unclamped(coeffs, dirs) -> np.ndarray:
    """Linear SH expansion, no clamping. ``coeffs (N, B, 3)`` or shared ``(B, 3)``, ``dirs (N, 3)`` -> ``(N, 3)``."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    basis = sh_basis(dirs, degree_from_basis(coeffs.shape[-2]))
    if coeffs.ndim == 2:
        return basis @ coeffs
    return np.einsum("nb,nbc->nc", basis, coeffs)


def eval_sh(coeffs, direction) -> np.ndarray:
    """Colour of one SH expansion ``(B, 3)`` toward unit ``direction``, clamped to >= 0."""
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-6:
        raise ValueError("view direction must be unit length")
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if not np.all(np.isfinite(coeffs)):
        raise ValueError("SH coefficients must be finite")
    rgb = eval_sh_unclamped(coeffs[None], direction[None])[0]
    return np.maximum(rgb, 0.0)
