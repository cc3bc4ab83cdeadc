"""Adam and the per-scene fitting loop over layered raw parameters."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import SceneGradients, render_backward
from .geometry import CameraIntrinsics, Pose
from .layered import RAW_CLASSES, RawLayeredParams, build_layered_scene, init_raw_params, layered_backward
from .objective import LossConfig, MetricsReport, eval_pair, photometric_loss
from .rasterizer import RenderOptions, render, render_with_context

log = logging.getLogger(__name__)


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class FitConfig:
    learning_rate: float = 1e-4
    steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    n_layers: int = 2
    padding: int = 4
    sh_degree: int = 0
    lr_multipliers: dict = field(default_factory=dict)
    clip_grad_norm: float | None = 10.0
    init_noise: float = 0.0
    offset_scale: float = 1.0
    include_source: bool = True
    loss: LossConfig = field(default_factory=LossConfig)
    render: RenderOptions = field(default_factory=RenderOptions)
    crop_fraction: float = 0.05

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise FitError("learning_rate must be positive")
        if self.steps < 0:
            raise FitError("steps must be >= 0")
        unknown = set(self.lr_multipliers) - set(RAW_CLASSES)
        if unknown:
            raise FitError(f"unknown parameter classes in lr_multipliers: {sorted(unknown)}")

    def lr_for(self, name: str) -> float:
        return self.learning_rate * self.lr_multipliers.get(name, 1.0)

    @classmethod
    def desk(cls, **overrides) -> "FitConfig":
        """Settings for direct per-scene optimization at desk scale.

        Per-parameter step sizes sized to each class's natural units; the
        1e-4 default suits a network's weights, not the scene tensor itself.
        """
        base = dict(
            learning_rate=1e-2,
            lr_multipliers={"opacity": 5.0, "delta_depth": 5.0, "offset": 0.2, "scale": 1.0,
                            "rotation": 1.0, "colour": 1.0},
        )
        base.update(overrides)
        return cls(**base)


@dataclass(eq=False)
class FitState:
    params: RawLayeredParams
    m: dict
    v: dict
    step: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def initial(cls, params: RawLayeredParams) -> "FitState":
        arrays = params.arrays()
        return cls(params, {k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()})


def clip_by_global_norm(grads: dict, max_norm: float | None) -> tuple[dict, float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


def adam_step(state: FitState, grads: dict, cfg: FitConfig) -> FitState:
    """One bias-corrected Adam update; raw quaternions are renormalized afterwards."""
    arrays = state.params.arrays()
    for k in RAW_CLASSES:
        g = grads.get(k)
        if g is None:
            raise FitError(f"missing gradient for {k}")
        if g.shape != arrays[k].shape:
            raise FitError(f"gradient for {k} has shape {g.shape}, expected {arrays[k].shape}")
        if not np.all(np.isfinite(g)):
            raise FitError(f"non-finite gradient in parameter class '{k}'")
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new, m_new, v_new = {}, {}, {}
    for k in RAW_CLASSES:
        g = grads[k]
        m = b1 * state.m[k] + (1 - b1) * g
        v = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        update = cfg.lr_for(k) * m_hat / (np.sqrt(v_hat) + cfg.eps)
        p = arrays[k] - update
        if k == "rotation" and np.any(update != 0):
            p = p / np.linalg.norm(p, axis=-1, keepdims=True)
        new[k], m_new[k], v_new[k] = p, m, v
    return FitState(state.params.with_arrays(new), m_new, v_new, t, list(state.history))


def scene_loss_and_grads(params: RawLayeredParams, depth, targets, cam: CameraIntrinsics,
                         cfg: FitConfig, source_pose: Pose | None = None):
    """Summed photometric loss over ``targets`` and its gradient w.r.t. the raw params."""
    scene, build = build_layered_scene(depth, params, cam, source_pose, cfg.offset_scale,
                                       return_build=True)
    total = 0.0
    gsum = SceneGradients.zeros_like(scene)
    for image, pose in targets:
        out, ctx = render_with_context(scene, cam, pose, cfg.render)
        loss, g_img = photometric_loss(out.colour, image, cfg.loss)
        total += loss
        gsum = gsum + render_backward(scene, cam, pose, g_img, cfg.render, ctx)
    return total, layered_backward(gsum, build)


@dataclass(eq=False)
class FitResult:
    params: RawLayeredParams
    history: list
    metrics: list  # MetricsReport per target, in input order
    state: FitState


def render_params(params: RawLayeredParams, depth, cam: CameraIntrinsics, pose: Pose,
                  cfg: FitConfig, source_pose: Pose | None = None):
    scene = build_layered_scene(depth, params, cam, source_pose, cfg.offset_scale)
    return render(scene, cam, pose, cfg.render)


def evaluate_params(params, depth, cam, views, cfg: FitConfig, source_pose=None) -> list[MetricsReport]:
    scene = build_layered_scene(depth, params, cam, source_pose, cfg.offset_scale)
    return [eval_pair(render(scene, cam, pose, cfg.render).colour, image, cfg.crop_fraction, cfg.loss)
            for image, pose in views]


def fit_scene(source_image, depth, targets, cam: CameraIntrinsics, cfg: FitConfig | None = None,
              source_pose: Pose | None = None, init: RawLayeredParams | None = None,
              callback=None) -> FitResult:
    """Optimize layered raw parameters so renders match the target views.

    ``targets`` is a list of ``(image, Pose)``; when ``cfg.include_source`` the
    source image (seen from ``source_pose``) is appended as an extra target.
    """
    cfg = cfg or FitConfig()
    source_pose = source_pose or Pose.identity()
    source_image = np.asarray(source_image, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    targets = [(np.asarray(img, dtype=np.float64), pose) for img, pose in targets]
    if not targets:
        raise FitError("need at least one target view")
    for img, _ in targets:
        if img.shape != source_image.shape:
            raise FitError("all images must share one size")
    if depth.shape != source_image.shape[:2]:
        raise FitError("depth map does not match the source image")

    if init is None:
        params = init_raw_params(source_image, depth, cam, cfg.n_layers, cfg.padding, cfg.sh_degree)
        if cfg.init_noise > 0:
            rng = np.random.default_rng(cfg.seed)
            params = params.with_arrays({
                k: a + cfg.init_noise * rng.standard_normal(a.shape)
                for k, a in params.arrays().items() if k != "rotation"})
    else:
        params = init.copy()
    train = list(targets)
    if cfg.include_source:
        train.append((source_image, source_pose))

    state = FitState.initial(params)
    for step in range(cfg.steps):
        loss, grads = scene_loss_and_grads(state.params, depth, train, cam, cfg, source_pose)
        grads, gnorm = clip_by_global_norm(grads, cfg.clip_grad_norm)
        history = state.history + [loss]
        state = adam_step(state, grads, cfg)
        state.history = history
        if callback is not None:
            callback(step, loss, gnorm)
        if step % 100 == 0:
            log.debug("step %d loss %.6f |g| %.4g", step, loss, gnorm)

    metrics = evaluate_params(state.params, depth, cam, targets, cfg, source_pose)
    return FitResult(state.params, list(state.history), metrics, state)


def frozen(cfg: FitConfig, *classes: str) -> FitConfig:
    """Copy of ``cfg`` with learning disabled for the given parameter classes."""
    mult = dict(cfg.lr_multipliers)
    for c in classes:
        mult[c] = 0.0
    return replace(cfg, lr_multipliers=mult)
