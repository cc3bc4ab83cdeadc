"""Gaussian mixture scene representation, stored structure-of-arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import quat_to_rotmat
from .sh import degree_from_basis, num_basis


class SceneError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Gaussian3D:
    """One primitive. ``scale`` holds variances (the eigenvalues of the covariance)."""

    mean: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity: float
    sh: np.ndarray  # ((L+1)^2, 3)

    def __post_init__(self):
        if np.any(np.asarray(self.scale) <= 0):
            raise SceneError("scale entries must be positive")
        if not 0.0 <= self.opacity < 1.0:
            raise SceneError("opacity must lie in [0, 1)")
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise SceneError("rotation quaternion must be unit-norm")


def covariance_from(rotations, scales) -> np.ndarray:
    """``R(q)^T diag(s) R(q)`` for ``(N, 4)`` quaternions and ``(N, 3)`` variances."""
    R = quat_to_rotmat(rotations)
    return np.einsum("...ki,...k,...kj->...ij", R, np.asarray(scales, dtype=np.float64), R)


def covariance_of(g: Gaussian3D) -> np.ndarray:
    return covariance_from(g.rotation, g.scale)


class GaussianScene:
    """Ordered set of Gaussians sharing one SH degree.

    Arrays: ``means (N, 3)``, ``rotations (N, 4)`` as ``(w, x, y, z)``,
    ``scales (N, 3)`` variances, ``opacities (N,)``, ``sh (N, B, 3)``.
    Quaternions need not be exactly unit-norm; consumers normalize them.
    The arrays are made read-only; use :meth:`replace` to derive a new scene.
    """

    __slots__ = ("means", "rotations", "scales", "opacities", "sh", "sh_degree")

    def __init__(self, means, rotations, scales, opacities, sh, sh_degree: int | None = None):
        try:
            means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
            n = means.shape[0]
            rotations = np.asarray(rotations, dtype=np.float64).reshape(n, 4)
            scales = np.asarray(scales, dtype=np.float64).reshape(n, 3)
            opacities = np.asarray(opacities, dtype=np.float64).reshape(n)
            sh = np.asarray(sh, dtype=np.float64)
            if sh_degree is None:
                sh_degree = degree_from_basis(sh.shape[1]) if sh.ndim == 3 else 0
            sh = sh.reshape(n, num_basis(sh_degree), 3)
        except ValueError as e:
            raise SceneError(f"inconsistent scene arrays: {e}") from None
        if np.any(scales <= 0):
            raise SceneError("scale entries must be positive")
        if np.any((opacities < 0) | (opacities >= 1)):
            raise SceneError("opacities must lie in [0, 1)")
        if n and np.any(np.linalg.norm(rotations, axis=1) == 0):
            raise SceneError("zero-norm rotation quaternion")
        for name, arr in (("means", means), ("rotations", rotations), ("scales", scales),
                          ("opacities", opacities), ("sh", sh)):
            if not np.all(np.isfinite(arr)):
                raise SceneError(f"non-finite values in {name}")
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "sh_degree", int(sh_degree))

    def __setattr__(self, key, value):
        raise AttributeError("GaussianScene is immutable")

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, num_basis(sh_degree), 3)), sh_degree)

    @classmethod
    def from_gaussians(cls, gaussians, sh_degree: int = 0) -> "GaussianScene":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty(sh_degree)
        return cls([g.mean for g in gaussians], [g.rotation for g in gaussians],
                   [g.scale for g in gaussians], [g.opacity for g in gaussians],
                   np.stack([g.sh for g in gaussians]), sh_degree)

    @property
    def count(self) -> int:
        return self.means.shape[0]

    def __len__(self):
        return self.count

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(self.means[i], self.rotations[i], self.scales[i],
                          float(self.opacities[i]), self.sh[i])

    @property
    def gaussians(self) -> list[Gaussian3D]:
        return [self[i] for i in range(self.count)]

    def covariances(self) -> np.ndarray:
        return covariance_from(self.rotations, self.scales)

    def replace(self, **fields) -> "GaussianScene":
        kw = {k: getattr(self, k) for k in self.__slots__}
        kw.update(fields)
        return GaussianScene(**kw)

    def equals(self, other: "GaussianScene") -> bool:
        return self.sh_degree == other.sh_degree and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("means", "rotations", "scales", "opacities", "sh"))

    def __repr__(self):
        return f"GaussianScene(count={self.count}, sh_degree={self.sh_degree})"


def concat_scenes(a: GaussianScene, b: GaussianScene) -> GaussianScene:
    if a.sh_degree != b.sh_degree:
        raise SceneError(f"SH degree mismatch: {a.sh_degree} vs {b.sh_degree}")
    return GaussianScene(
        np.concatenate([a.means, b.means]),
        np.concatenate([a.rotations, b.rotations]),
        np.concatenate([a.scales, b.scales]),
        np.concatenate([a.opacities, b.opacities]),
        np.concatenate([a.sh, b.sh]),
        a.sh_degree,
    )
