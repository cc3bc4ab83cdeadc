"""Pinhole camera, rigid poses and pixel/ray/point conversions.

Conventions used everywhere in the package:

* Poses are camera-from-world: ``x_cam = R @ x_world + t``.
* Cameras are right-handed with +z forward; depth is view-space z.
* Quaternions are stored scalar-first ``(w, x, y, z)``.
* Image pixel ``(row r, col c)`` has its centre at ``(x=c, y=r)``. Pixel
  coordinates relative to the principal point (``PixelCoord``) are obtained by
  subtracting ``(cx, cy)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

DEFAULT_Z_NEAR = 0.01


class GeometryError(ValueError):
    """Raised for invalid geometric input (non-positive depth, bad quaternion...)."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"image size must be >= 1, got {self.width}x{self.height}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise GeometryError("principal point outside the image")

    @classmethod
    def centered(cls, f: float, width: int, height: int) -> "CameraIntrinsics":
        """Square-pixel camera with the principal point at the image centre."""
        return cls(f, f, (width - 1) / 2.0, (height - 1) / 2.0, width, height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, width: int, height: int) -> "CameraIntrinsics":
        sx, sy = width / self.width, height / self.height
        return CameraIntrinsics(self.fx * sx, self.fy * sy, (self.cx + 0.5) * sx - 0.5,
                                (self.cy + 0.5) * sy - 0.5, width, height)


def normalize_quaternion(q, tol: float | None = None) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0) or not np.all(np.isfinite(n)):
        raise GeometryError("quaternion has zero or non-finite norm")
    if tol is not None and np.any(np.abs(n - 1.0) > tol):
        raise GeometryError("quaternion is not unit-norm")
    return q / n


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of (a batch of) unit quaternions ``(w, x, y, z)``.

    Accepts shape ``(4,)`` or ``(N, 4)``; the input is normalized first.
    """
    q = normalize_quaternion(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R) -> np.ndarray:
    xyzw = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
    q = np.roll(xyzw, 1, axis=-1)
    # canonical hemisphere keeps conversions reproducible
    return np.where(q[..., :1] < 0, -q, q)


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


@dataclass(frozen=True, eq=False)
class Pose:
    """Camera-from-world rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise GeometryError("translation must be finite")
        q = normalize_quaternion(q)
        q.setflags(write=False)
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, R, t) -> "Pose":
        return cls(rotmat_to_quat(R), t)

    @classmethod
    def from_matrix34(cls, M) -> "Pose":
        M = np.asarray(M, dtype=np.float64).reshape(3, 4)
        return cls.from_matrix(M[:, :3], M[:, 3])

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def matrix34(self) -> np.ndarray:
        return np.concatenate([self.R, self.translation[:, None]], axis=1)

    @property
    def camera_center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.R.T @ self.translation

    def inverse(self) -> "Pose":
        R = self.R
        q = self.rotation * np.array([1.0, -1.0, -1.0, -1.0])
        return Pose(q, -R.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        q = quat_multiply(self.rotation, other.rotation)
        return Pose(q, self.R @ other.translation + self.translation)

    def apply(self, points) -> np.ndarray:
        """Transform world points (``(3,)`` or ``(N, 3)``) into the camera frame."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.R.T + self.translation

    def allclose(self, other: "Pose", atol: float = 1e-9) -> bool:
        return bool(np.allclose(self.matrix34, other.matrix34, atol=atol, rtol=0))

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def to_centered(cam: CameraIntrinsics, pixel) -> np.ndarray:
    """Image-frame pixel position -> principal-point-centred ``PixelCoord``."""
    return np.asarray(pixel, dtype=np.float64) - np.array([cam.cx, cam.cy])


def from_centered(cam: CameraIntrinsics, u) -> np.ndarray:
    return np.asarray(u, dtype=np.float64) + np.array([cam.cx, cam.cy])


def unproject_pixel(cam: CameraIntrinsics, u, d) -> np.ndarray:
    """Back-project centred pixel coordinates ``u`` at view depth ``d``.

    Vectorized: ``u`` may be ``(..., 2)`` with ``d`` broadcastable to ``u[..., 0]``.
    The z component of the result is ``d`` itself.
    """
    u = np.asarray(u, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if np.any(~(d > 0)):
        raise GeometryError("depth must be positive")
    d = np.broadcast_to(d, u.shape[:-1])
    return np.stack([u[..., 0] * d / cam.fx, u[..., 1] * d / cam.fy, d], axis=-1)


def project_points(cam: CameraIntrinsics, pose: Pose, x_world, z_near: float = DEFAULT_Z_NEAR):
    """Project world points ``(N, 3)``.

    Returns ``(pixels (N, 2), depths (N,), in_front (N,) bool)``. Pixels of
    points at or behind ``z_near`` are NaN.
    """
    p = pose.apply(np.atleast_2d(x_world))
    z = p[:, 2]
    ok = z > z_near
    with np.errstate(divide="ignore", invalid="ignore"):
        px = np.stack([cam.fx * p[:, 0] / z + cam.cx, cam.fy * p[:, 1] / z + cam.cy], axis=1)
    px[~ok] = np.nan
    return px, z, ok


def project_point(cam: CameraIntrinsics, pose: Pose, x_world, z_near: float = DEFAULT_Z_NEAR):
    """Project one world point to ``(pixel, depth)``; ``None`` when it is behind the camera."""
    px, z, ok = project_points(cam, pose, np.asarray(x_world, dtype=np.float64).reshape(1, 3), z_near)
    if not ok[0]:
        return None
    return px[0], float(z[0])


def pixel_grid(height: int, width: int) -> np.ndarray:
    """Image-frame pixel centres, shape ``(H, W, 2)`` as ``(x, y)``."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return np.stack([xs, ys], axis=-1)
