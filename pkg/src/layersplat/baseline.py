"""Depth-unprojection baseline: one isotropic Gaussian per pixel at the predicted depth."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .autograd import render_backward
from .fitting import FitConfig, clip_by_global_norm
from .geometry import CameraIntrinsics, Pose, pixel_grid, to_centered, unproject_pixel
from .layered import RawLayeredParams, logistic
from .objective import photometric_loss
from .rasterizer import render_with_context
from .scene import GaussianScene
from .sh import rgb_to_dc

log = logging.getLogger(__name__)

MODES = ("fixed", "depth_dependent")
TUNED = ("alpha_colour", "s0", "sigma0")


class BaselineError(ValueError):
    pass


@dataclass(frozen=True)
class BaselineHyper:
    alpha_colour: float = 1.0  # colour gain
    s0: float = -4.5  # log variance
    sigma0: float = 4.0  # opacity logit
    d0: float = 10.0  # reference depth for the depth-dependent mode (metres)
    mode: str = "fixed"

    def __post_init__(self):
        if not self.d0 > 0:
            raise BaselineError("d0 must be positive")
        if self.mode not in MODES:
            raise BaselineError(f"mode must be one of {MODES}, got {self.mode!r}")

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in TUNED])

    def with_vector(self, v) -> "BaselineHyper":
        return replace(self, **{k: float(x) for k, x in zip(TUNED, v)})


def _check_inputs(image, depth, cam: CameraIntrinsics):
    image = np.asarray(image, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] < 3:
        raise BaselineError("image must be (H, W, 3)")
    if depth.shape != image.shape[:2]:
        raise BaselineError(f"depth {depth.shape} does not match image {image.shape[:2]}")
    if depth.shape != (cam.height, cam.width):
        raise BaselineError("image size does not match the camera")
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise BaselineError("depth must be positive and finite")
    return image[..., :3], depth


def _log_variance(hyper: BaselineHyper, depth: np.ndarray) -> np.ndarray:
    if hyper.mode == "fixed":
        return np.full(depth.shape, hyper.s0)
    return hyper.s0 + np.log(depth / hyper.d0)


def unproject_baseline(image, depth, cam: CameraIntrinsics, hyper: BaselineHyper | None = None,
                       source_pose: Pose | None = None) -> GaussianScene:
    """Degree-0 scene with ``H * W`` Gaussians, row-major over pixels."""
    hyper = hyper or BaselineHyper()
    image, depth = _check_inputs(image, depth, cam)
    H, W = depth.shape
    u = to_centered(cam, pixel_grid(H, W)).reshape(-1, 2)
    means = unproject_pixel(cam, u, depth.ravel())
    if source_pose is not None:
        means = source_pose.inverse().apply(means)
    n = H * W
    scales = np.repeat(np.exp(_log_variance(hyper, depth)).reshape(-1, 1), 3, axis=1)
    rotations = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    opac = np.full(n, float(logistic(hyper.sigma0)))
    sh = rgb_to_dc(hyper.alpha_colour * image.reshape(n, 1, 3))
    return GaussianScene(means, rotations, scales, opac, sh, 0)


def baseline_as_layered(image, depth, cam: CameraIntrinsics,
                        hyper: BaselineHyper | None = None) -> RawLayeredParams:
    """The baseline written as one-layer raw parameters (no padding, zero offsets)."""
    hyper = hyper or BaselineHyper()
    image, depth = _check_inputs(image, depth, cam)
    H, W = depth.shape
    rotation = np.zeros((1, H, W, 4))
    rotation[..., 0] = 1.0
    return RawLayeredParams(
        opacity=np.full((1, H, W), hyper.sigma0),
        delta_depth=np.zeros((0, H, W)),
        offset=np.zeros((1, H, W, 3)),
        scale=np.repeat(_log_variance(hyper, depth)[None, ..., None], 3, axis=-1),
        rotation=rotation,
        colour=rgb_to_dc(hyper.alpha_colour * image)[None, :, :, None, :],
        padding=0,
    )


def _scenes_loss_and_grad(hyper: BaselineHyper, scenes, cam: CameraIntrinsics, cfg: FitConfig):
    total = 0.0
    grad = np.zeros(3)
    for item in scenes:
        source, depth, targets = item[:3]
        source_pose = item[3] if len(item) > 3 else None
        image, depth = _check_inputs(source, depth, cam)
        scene = unproject_baseline(image, depth, cam, hyper, source_pose)
        views = list(targets)
        if cfg.include_source:
            views.append((image, source_pose or Pose.identity()))
        for target, pose in views:
            out, ctx = render_with_context(scene, cam, pose, cfg.render)
            loss, g_img = photometric_loss(out.colour, target, cfg.loss)
            total += loss
            g = render_backward(scene, cam, pose, g_img, cfg.render, ctx)
            rgb = image.reshape(-1, 3)
            grad[0] += np.sum(g.sh[:, 0, :] * rgb_to_dc(rgb))
            grad[1] += np.sum(g.scales * scene.scales)
            op = scene.opacities
            grad[2] += np.sum(g.opacities * op * (1 - op))
    return total, grad


def baseline_loss(hyper: BaselineHyper, scenes, cam: CameraIntrinsics, cfg: FitConfig | None = None) -> float:
    return _scenes_loss_and_grad(hyper, scenes, cam, cfg or FitConfig())[0]


@dataclass(eq=False)
class TuneResult:
    hyper: BaselineHyper
    best_loss: float
    history: list  # (loss, BaselineHyper) per evaluated step


def tune_baseline(scenes, cam: CameraIntrinsics, init: BaselineHyper | None = None,
                  cfg: FitConfig | None = None, validation=None) -> TuneResult:
    """Adam on (colour gain, log variance, opacity logit) through the renderer.

    ``scenes`` holds ``(source_image, depth, targets[, source_pose])`` items,
    with ``targets`` a list of ``(image, Pose)``; the source view joins the
    objective when ``cfg.include_source``. The returned hypers are those with the lowest loss
    on ``validation`` (same layout; defaults to ``scenes``) over the run.
    """
    init = init or BaselineHyper()
    cfg = cfg or FitConfig(learning_rate=1e-2, steps=500)
    if not scenes:
        raise BaselineError("need at least one scene")
    validation = scenes if validation is None else validation
    if cfg.steps == 0:
        return TuneResult(init, float("nan"), [])
    x = init.vector()
    m = np.zeros(3)
    v = np.zeros(3)
    best, best_loss = init, np.inf
    history = []
    for t in range(1, cfg.steps + 2):
        hyper = init.with_vector(x)
        loss, g = _scenes_loss_and_grad(hyper, scenes, cam, cfg)
        val = loss if validation is scenes else baseline_loss(hyper, validation, cam, cfg)
        history.append((val, hyper))
        if val < best_loss:
            best, best_loss = hyper, val
        if t > cfg.steps:
            break  # the last iterate is scored but not stepped
        g, _ = clip_by_global_norm({"h": g}, cfg.clip_grad_norm)
        g = g["h"]
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        x = x - cfg.learning_rate * (m / (1 - cfg.beta1**t)) / (np.sqrt(v / (1 - cfg.beta2**t)) + cfg.eps)
        if t % 50 == 0:
            log.debug("baseline step %d loss %.6f hypers %s", t, val, x)
    return TuneResult(best, float(best_loss), history)
