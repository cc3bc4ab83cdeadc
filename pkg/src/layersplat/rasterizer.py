"""Tile-based forward splatting renderer.

Pipeline: project every Gaussian to a 2D footprint (perspective Jacobian
linearization plus a small anti-alias blur), sort globally by view depth with
the source index as tie-break, bin the integer pixel bounding boxes into
tiles, then alpha-composite front to back per pixel.

A splat contributes to a pixel iff the pixel centre lies inside the splat's
clipped bounding box and within ``cutoff_sigma`` Mahalanobis units. That test
is per pixel, so the image does not depend on how pixels are grouped into
tiles or how tiles are scheduled across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .geometry import DEFAULT_Z_NEAR, CameraIntrinsics, Pose
from .scene import Gaussian3D, GaussianScene
from .sh import sh_basis


class RenderError(ValueError):
    pass


@dataclass(frozen=True)
class RenderOptions:
    tile_size: int = 16
    background: tuple = (0.0, 0.0, 0.0)
    z_near: float = DEFAULT_Z_NEAR
    alpha_max: float = 0.99
    t_min: float = 1e-4
    blur: float = 0.3
    cutoff_sigma: float = 3.0

    def __post_init__(self):
        if self.tile_size < 1:
            raise RenderError("tile_size must be >= 1")
        if len(self.background) != 3:
            raise RenderError("background must be an RGB triple")
        if not 0 < self.alpha_max <= 1:
            raise RenderError("alpha_max must be in (0, 1]")


@dataclass(frozen=True, eq=False)
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: float
    colour: np.ndarray
    opacity: float
    source_index: int


@dataclass(frozen=True, eq=False)
class RenderOutput:
    colour: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    expected_depth: np.ndarray  # (H, W)
    transmittance: np.ndarray  # (H, W) final T per pixel


@dataclass(eq=False)
class Projection:
    """Per-Gaussian projected quantities plus what the backward pass needs."""

    visible: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray  # (N, 3): xx, xy, yy, blur included
    conic: np.ndarray  # (N, 3): inverse of cov2d as a, b, c
    depth: np.ndarray
    colour: np.ndarray
    colour_raw: np.ndarray
    opacity: np.ndarray
    bbox: np.ndarray  # (N, 4) int64: x_lo, x_hi, y_lo, y_hi (inclusive pixel indices)
    cache: dict = field(default_factory=dict)


def project_scene(scene: GaussianScene, cam: CameraIntrinsics, pose: Pose,
                  opts: RenderOptions | None = None) -> Projection:
    opts = opts or RenderOptions()
    n = scene.count
    W = pose.R
    view, mean2d, cov2d, conic, bbox, front_mask, visible = _kernels.project_gaussians(
        scene.means, scene.rotations, scene.scales, np.ascontiguousarray(W),
        np.ascontiguousarray(pose.translation, dtype=np.float64), cam.fx, cam.fy, cam.cx, cam.cy,
        cam.width, cam.height, opts.z_near, opts.blur, opts.cutoff_sigma)
    front = np.flatnonzero(front_mask)
    colour = np.zeros((n, 3))
    colour_raw = np.zeros((n, 3))
    cache = {"front": front, "front_mask": front_mask, "W": W, "view": view}
    if front.size:
        offset = pose.camera_center - scene.means[front]
        dist = np.linalg.norm(offset, axis=1)
        dirs = offset / dist[:, None]
        basis = sh_basis(dirs, scene.sh_degree)
        if scene.sh_degree == 0:
            raw = basis[:, 0:1] * scene.sh[front, 0]
        else:
            raw = np.einsum("nb,nbc->nc", basis, scene.sh[front])
        colour_raw[front] = raw
        colour[front] = np.maximum(raw, 0.0)
        cache.update(dirs=dirs, dist=dist, basis=basis)

    return Projection(visible, mean2d, cov2d, conic, view[:, 2].copy(), colour, colour_raw,
                      scene.opacities.copy(), bbox, cache)


def project_gaussian(g: Gaussian3D, cam: CameraIntrinsics, pose: Pose,
                     opts: RenderOptions | None = None, index: int = 0) -> Splat2D | None:
    """Project one Gaussian; ``None`` when it is culled."""
    scene = GaussianScene.from_gaussians([g], sh_degree=int(round(math.sqrt(len(g.sh)))) - 1)
    p = project_scene(scene, cam, pose, opts)
    if not p.visible[0]:
        return None
    xx, xy, yy = p.cov2d[0]
    return Splat2D(p.mean2d[0], np.array([[xx, xy], [xy, yy]]), float(p.depth[0]),
                   p.colour[0], float(p.opacity[0]), index)


@dataclass(eq=False)
class RasterContext:
    """Forward-pass state reused by the backward pass."""

    projection: Projection
    order: np.ndarray  # sorted visible Gaussian indices (front to back)
    offsets: np.ndarray
    ids: np.ndarray
    tiles_x: int
    n_contrib: np.ndarray
    n_clamped: np.ndarray
    opts: RenderOptions

    def structure_key(self) -> bytes:
        """Discrete state of the pass: culling, footprints, contributor counts, clamps.

        Two parameter settings with equal keys lie in the same smooth piece of
        the render function.
        """
        p = self.projection
        parts = (p.visible, p.bbox, self.n_contrib, self.n_clamped, p.colour_raw > 0)
        return b"".join(np.ascontiguousarray(a).tobytes() for a in parts)


def _sorted_visible(p: Projection) -> np.ndarray:
    vis = np.flatnonzero(p.visible)
    return vis[np.argsort(p.depth[vis], kind="stable")]


def _check_camera(cam: CameraIntrinsics):
    if cam.width < 1 or cam.height < 1:
        raise RenderError("zero-size image")


def rasterize(p: Projection, cam: CameraIntrinsics, opts: RenderOptions):
    _check_camera(cam)
    order = _sorted_visible(p)
    ts = opts.tile_size
    tiles_x = -(-cam.width // ts)
    tiles_y = -(-cam.height // ts)
    bbox = np.ascontiguousarray(p.bbox[order])
    offsets, ids = _kernels.bin_splats(bbox, ts, tiles_x, tiles_y)
    bg = np.asarray(opts.background, dtype=np.float64)
    colour, alpha, depth, trans, n_contrib, n_clamped = _kernels.forward_tiles(
        offsets, ids, np.ascontiguousarray(p.mean2d[order]), np.ascontiguousarray(p.conic[order]),
        bbox, np.ascontiguousarray(p.colour[order]), np.ascontiguousarray(p.opacity[order]),
        np.ascontiguousarray(p.depth[order]), bg, cam.width, cam.height, ts, tiles_x,
        opts.alpha_max, opts.t_min, opts.cutoff_sigma**2)
    out = RenderOutput(colour, alpha, depth, trans)
    return out, RasterContext(p, order, offsets, ids, tiles_x, n_contrib, n_clamped, opts)


def render_with_context(scene: GaussianScene, cam: CameraIntrinsics, pose: Pose,
                        opts: RenderOptions | None = None):
    opts = opts or RenderOptions()
    _check_camera(cam)
    return rasterize(project_scene(scene, cam, pose, opts), cam, opts)


def render(scene: GaussianScene, cam: CameraIntrinsics, pose: Pose,
           opts: RenderOptions | None = None) -> RenderOutput:
    return render_with_context(scene, cam, pose, opts)[0]


def render_reference(scene: GaussianScene, cam: CameraIntrinsics, pose: Pose,
                     opts: RenderOptions | None = None) -> RenderOutput:
    """Untiled oracle: every splat visits every pixel of its bounding box in global depth order."""
    opts = opts or RenderOptions()
    _check_camera(cam)
    p = project_scene(scene, cam, pose, opts)
    H, Wd = cam.height, cam.width
    C = np.zeros((H, Wd, 3))
    A = np.zeros((H, Wd))
    D = np.zeros((H, Wd))
    T = np.ones((H, Wd))
    live = np.ones((H, Wd), dtype=bool)
    ys, xs = np.mgrid[0:H, 0:Wd].astype(np.float64)
    cutoff2 = opts.cutoff_sigma**2
    for k in _sorted_visible(p):
        x0, x1, y0, y1 = p.bbox[k]
        sl = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        dx = xs[sl] - p.mean2d[k, 0]
        dy = ys[sl] - p.mean2d[k, 1]
        a, b, c = p.conic[k]
        m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        hit = live[sl] & (m <= cutoff2)
        alpha = np.minimum(p.opacity[k] * np.exp(-0.5 * m), opts.alpha_max)
        Ts = T[sl]
        w = np.where(hit, alpha * Ts, 0.0)
        C[sl] += p.colour[k] * w[..., None]
        D[sl] += p.depth[k] * w
        A[sl] += w
        T[sl] = np.where(hit, Ts * (1.0 - alpha), Ts)
        live[sl] &= ~(hit & (T[sl] < opts.t_min))
    C += T[..., None] * np.asarray(opts.background, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        D = np.where(A > 0, D / A, 0.0)
    return RenderOutput(C, A, D, T)


__all__ = [
    "RenderOptions", "RenderOutput", "Splat2D", "Projection", "RenderError",
    "project_scene", "project_gaussian", "render", "render_with_context", "render_reference",
]
