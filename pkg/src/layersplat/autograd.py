"""Analytic backward pass of the renderer and a finite-difference verifier.

The image-space adjoint runs in the numba kernels (per-slot contributions,
reduced per Gaussian in a fixed order); the chain rule through projection,
covariance, quaternion and SH evaluation is vectorized numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .geometry import CameraIntrinsics, Pose
from .rasterizer import RasterContext, RenderOptions, render_with_context
from .scene import GaussianScene
from .sh import sh_basis_grad

PARAM_CLASSES = ("means", "rotations", "scales", "opacities", "sh")


@dataclass(eq=False)
class SceneGradients:
    means: np.ndarray  # (N, 3)
    rotations: np.ndarray  # (N, 4) ambient quaternion gradient
    scales: np.ndarray  # (N, 3)
    opacities: np.ndarray  # (N,)
    sh: np.ndarray  # (N, B, 3)

    @classmethod
    def zeros_like(cls, scene: GaussianScene) -> "SceneGradients":
        n = scene.count
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros_like(scene.sh))

    def __getitem__(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def __add__(self, other: "SceneGradients") -> "SceneGradients":
        return SceneGradients(*(getattr(self, k) + getattr(other, k) for k in PARAM_CLASSES))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, k))) for k in PARAM_CLASSES)


def image_space_backward(ctx: RasterContext, cam: CameraIntrinsics, grad_colour: np.ndarray):
    """Per-Gaussian gradients w.r.t. 2D mean, conic, opacity and (clamped) colour: ``(N, 9)``."""
    p = ctx.projection
    opts = ctx.opts
    order = ctx.order
    n_slots = ctx.n_contrib.ravel()
    slot_offsets = np.zeros(n_slots.size + 1, dtype=np.int64)
    np.cumsum(n_slots, out=slot_offsets[1:])
    total = int(slot_offsets[-1])
    slot_id = np.zeros(total, dtype=np.int64)
    slot_grad = np.zeros((total, _kernels.N_SLOT_GRAD))
    slot_alpha = np.zeros(total)
    slot_trans = np.zeros(total)
    bbox = np.ascontiguousarray(p.bbox[order])
    _kernels.backward_tiles(
        ctx.offsets, ctx.ids, np.ascontiguousarray(p.mean2d[order]), np.ascontiguousarray(p.conic[order]),
        bbox, np.ascontiguousarray(p.colour[order]), np.ascontiguousarray(p.opacity[order]),
        np.asarray(opts.background, dtype=np.float64), cam.width, cam.height, opts.tile_size,
        ctx.tiles_x, opts.alpha_max, opts.t_min, opts.cutoff_sigma**2,
        np.ascontiguousarray(grad_colour, dtype=np.float64), slot_offsets, slot_id, slot_grad,
        slot_alpha, slot_trans)
    per_sorted = _kernels.reduce_slots(slot_id, slot_grad, order.size)
    out = np.zeros((p.visible.size, _kernels.N_SLOT_GRAD))
    out[order] = per_sorted
    return out


def chain_to_scene(scene: GaussianScene, ctx: RasterContext, cam: CameraIntrinsics, pose: Pose,
                   g2d: np.ndarray) -> SceneGradients:
    """Propagate image-space splat gradients to the 3D scene parameters."""
    p = ctx.projection
    out = SceneGradients.zeros_like(scene)
    c = p.cache
    front = c["front"]
    if front.size == 0:
        return out
    gmean, gquat, gscale = _kernels.chain_geometry(
        np.ascontiguousarray(g2d), c["view"], p.conic, scene.rotations, scene.scales,
        np.ascontiguousarray(c["W"]), cam.fx, cam.fy, c["front_mask"])
    out.means[:] = gmean
    out.rotations[:] = gquat
    out.scales[:] = gscale
    g = g2d[front]
    out.opacities[front] = g[:, 5]
    gcol = g[:, 6:9] * (p.colour_raw[front] > 0)

    # colour: SH coefficients and view direction
    out.sh[front] = c["basis"][:, :, None] * gcol[:, None, :]
    if scene.sh_degree > 0:
        dY = sh_basis_grad(c["dirs"], scene.sh_degree)  # (n, B, 3)
        gdir = np.einsum("nbc,nc,nbk->nk", scene.sh[front], gcol, dY)
        d = c["dirs"]
        gv = (gdir - d * np.sum(gdir * d, axis=1, keepdims=True)) / c["dist"][:, None]
        out.means[front] -= gv
    return out


def render_backward(scene: GaussianScene, cam: CameraIntrinsics, pose: Pose, grad_colour,
                    opts: RenderOptions | None = None, ctx: RasterContext | None = None) -> SceneGradients:
    """Gradient of ``sum(grad_colour * render(scene).colour)`` w.r.t. all scene parameters."""
    grad_colour = np.asarray(grad_colour, dtype=np.float64)
    if grad_colour.shape != (cam.height, cam.width, 3):
        raise ValueError(f"grad_colour shape {grad_colour.shape} does not match camera "
                         f"({cam.height}, {cam.width}, 3)")
    if not np.all(np.isfinite(grad_colour)):
        raise ValueError("grad_colour must be finite")
    if ctx is None:
        _, ctx = render_with_context(scene, cam, pose, opts)
    g2d = image_space_backward(ctx, cam, grad_colour)
    return chain_to_scene(scene, ctx, cam, pose, g2d)


@dataclass
class GradCheckEntry:
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    n_checked: int
    n_skipped: int


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor_frac: float = 1e-2,
                    abs_floor: float = 1e-9) -> np.ndarray:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, NaN where ``numeric`` is NaN.

    ``floor`` is ``floor_frac`` times the largest magnitude in the class, so
    entries that are tiny compared with the class scale do not dominate, and
    never below ``abs_floor`` so a class whose true gradient is zero compares
    rounding noise against a meaningful scale.
    """
    ok = np.isfinite(numeric)
    scale = max(np.max(np.abs(numeric[ok]), initial=0.0), np.max(np.abs(analytic[ok]), initial=0.0))
    floor = max(floor_frac * scale, abs_floor)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.where(ok, np.abs(analytic - numeric) / denom, np.nan)


def finite_diff_check(scene: GaussianScene, cam: CameraIntrinsics, pose: Pose, loss_fn,
                      h: float = 1e-5, analytic: SceneGradients | None = None,
                      opts: RenderOptions | None = None, classes=PARAM_CLASSES,
                      floor_frac: float = 1e-2) -> dict[str, GradCheckEntry]:
    """Compare analytic gradients with central differences of ``loss_fn``.

    ``loss_fn(colour_image) -> (loss, dloss/dcolour)``. When ``analytic`` is
    given it is checked as-is (lets the harness be tested with injected
    errors); otherwise it comes from :func:`render_backward`.

    A sample whose ``+h`` or ``-h`` evaluation changes the renderer's discrete
    state (a pixel entering or leaving a footprint cutoff, a clamp switching,
    culling) straddles a discontinuity; it is skipped and counted in
    ``n_skipped`` rather than compared.
    """
    out, ctx = render_with_context(scene, cam, pose, opts)
    base_key = ctx.structure_key()
    if analytic is None:
        _, g_img = loss_fn(out.colour)
        analytic = render_backward(scene, cam, pose, g_img, opts, ctx)

    def loss_at(**fields):
        o, c = render_with_context(scene.replace(**fields), cam, pose, opts)
        return loss_fn(o.colour)[0], c.structure_key()

    report = {}
    for name in classes:
        base = getattr(scene, name)
        numeric = np.full(base.shape, np.nan)
        flat = base.reshape(-1)
        for i in range(flat.size):
            plus = flat.copy()
            minus = flat.copy()
            plus[i] += h
            minus[i] -= h
            lp, kp = loss_at(**{name: plus.reshape(base.shape)})
            lm, km = loss_at(**{name: minus.reshape(base.shape)})
            if kp == base_key and km == base_key:
                numeric.reshape(-1)[i] = (lp - lm) / (2 * h)
        a = getattr(analytic, name)
        rel = relative_errors(a, numeric, floor_frac)
        checked = int(np.isfinite(rel).sum())
        if checked:
            worst = np.unravel_index(int(np.nanargmax(rel)), rel.shape)
            entry = GradCheckEntry(float(rel[worst]), tuple(int(i) for i in worst), float(a[worst]),
                                   float(numeric[worst]), checked, rel.size - checked)
        else:
            entry = GradCheckEntry(0.0, (), 0.0, 0.0, 0, rel.size)
        report[name] = entry
    return report


def linear_loss(weights: np.ndarray):
    """``L = sum(weights * colour)``; handy for gradient checks."""
    def fn(colour):
        return float(np.sum(weights * colour)), weights
    return fn
