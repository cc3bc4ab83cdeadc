"""Per-pixel, per-layer Gaussian parameters anchored on a depth map.

Every pixel of the padded grid ``(H + 2P) x (W + 2P)`` carries ``n_layers``
Gaussians. Layer ``i`` sits at depth ``D(u) + sum_{j<=i} delta_j`` with
``delta_1 = 0`` and non-negative later offsets, so deeper layers can only lie
behind earlier ones. Scenes are emitted layer-major, then row-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import SceneGradients
from .geometry import CameraIntrinsics, Pose, quat_to_rotmat
from .scene import GaussianScene
from .sh import num_basis, rgb_to_dc

RAW_CLASSES = ("opacity", "delta_depth", "offset", "scale", "rotation", "colour")
_OPACITY_CAP = np.nextafter(1.0, 0.0)


class LayeredError(ValueError):
    pass


def logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def channels_per_layer(sh_degree: int, first_layer: bool = True) -> int:
    """Raw channels per pixel and layer: opacity, offset, scale, rotation, colour (+ depth offset)."""
    c = 1 + 3 + 3 + 4 + 3 * num_basis(sh_degree)
    return c if first_layer else c + 1


@dataclass(eq=False)
class RawLayeredParams:
    """Unconstrained parameter tensor, one array per parameter class.

    Shapes (``K`` layers, ``Hp x Wp`` padded grid, ``B`` SH basis functions):
    ``opacity (K, Hp, Wp)``, ``delta_depth (K-1, Hp, Wp)``,
    ``offset (K, Hp, Wp, 3)``, ``scale (K, Hp, Wp, 3)``,
    ``rotation (K, Hp, Wp, 4)``, ``colour (K, Hp, Wp, B, 3)``.
    """

    opacity: np.ndarray
    delta_depth: np.ndarray
    offset: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    colour: np.ndarray
    padding: int = 0

    def __post_init__(self):
        K, Hp, Wp = self.opacity.shape
        B = self.colour.shape[-2]
        expected = {
            "delta_depth": (K - 1, Hp, Wp), "offset": (K, Hp, Wp, 3), "scale": (K, Hp, Wp, 3),
            "rotation": (K, Hp, Wp, 4), "colour": (K, Hp, Wp, B, 3),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise LayeredError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if K < 1:
            raise LayeredError("need at least one layer")
        if self.padding < 0 or Hp <= 2 * self.padding or Wp <= 2 * self.padding:
            raise LayeredError("padding inconsistent with the grid size")

    @property
    def n_layers(self) -> int:
        return self.opacity.shape[0]

    @property
    def grid_shape(self) -> tuple:
        return self.opacity.shape[1:]

    @property
    def image_shape(self) -> tuple:
        Hp, Wp = self.grid_shape
        return Hp - 2 * self.padding, Wp - 2 * self.padding

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.colour.shape[-2]))) - 1

    def arrays(self) -> dict:
        return {k: getattr(self, k) for k in RAW_CLASSES}

    def copy(self) -> "RawLayeredParams":
        return RawLayeredParams(**{k: v.copy() for k, v in self.arrays().items()}, padding=self.padding)

    def with_arrays(self, arrays: dict) -> "RawLayeredParams":
        kw = self.arrays()
        kw.update(arrays)
        return RawLayeredParams(**kw, padding=self.padding)

    def total_channels(self) -> int:
        return (channels_per_layer(self.sh_degree) * self.n_layers) + (self.n_layers - 1)

    def equals(self, other: "RawLayeredParams") -> bool:
        return self.padding == other.padding and all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in RAW_CLASSES)


@dataclass(eq=False)
class ActivatedPixelParams:
    opacity: np.ndarray  # (K, Hp, Wp) in (0, 1)
    delta: np.ndarray  # (K, Hp, Wp), delta[0] == 0
    offset: np.ndarray  # (K, Hp, Wp, 3) metres
    scale: np.ndarray  # (K, Hp, Wp, 3) variances
    rotation: np.ndarray  # (K, Hp, Wp, 4) unit
    colour: np.ndarray  # (K, Hp, Wp, B, 3)
    padding: int
    base_depth: np.ndarray | None = None  # (Hp, Wp) edge-padded depth map

    @property
    def n_layers(self) -> int:
        return self.opacity.shape[0]

    def layer_depths(self) -> np.ndarray:
        """``d_i = D + cumsum(delta)`` per layer, ``(K, Hp, Wp)``."""
        if self.base_depth is None:
            raise LayeredError("activated params carry no depth map")
        return self.base_depth[None] + np.cumsum(self.delta, axis=0)


def pad_depth(depth: np.ndarray, padding: int) -> np.ndarray:
    """Edge-replicate the depth map into the padding band."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise LayeredError("depth map must be 2D")
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise LayeredError("depth map must be positive and finite")
    return np.pad(depth, padding, mode="edge")


def activate_params(raw: RawLayeredParams, depth=None, offset_scale: float = 1.0,
                    max_offset: float | None = None) -> ActivatedPixelParams:
    """Map raw values to constrained Gaussian parameters.

    opacity = logistic, depth offset = softplus (layer 1 fixed at 0),
    scale = exp, rotation = normalize, offset = raw * offset_scale (optionally
    clamped to ``max_offset`` in norm), colour passed through.
    """
    for k, v in raw.arrays().items():
        if not np.all(np.isfinite(v)):
            raise LayeredError(f"non-finite raw values in {k}")
    qn = np.linalg.norm(raw.rotation, axis=-1, keepdims=True)
    if np.any(qn == 0):
        raise LayeredError("zero-norm raw rotation")
    K = raw.n_layers
    delta = np.zeros(raw.opacity.shape)
    if K > 1:
        delta[1:] = softplus(raw.delta_depth)
    offset = raw.offset * offset_scale
    if max_offset is not None:
        n = np.linalg.norm(offset, axis=-1, keepdims=True)
        offset = np.where(n > max_offset, offset * (max_offset / np.maximum(n, 1e-300)), offset)
    base = None
    if depth is not None:
        base = pad_depth(depth, raw.padding)
        if base.shape != raw.grid_shape:
            raise LayeredError(f"depth {np.shape(depth)} does not match parameter grid "
                               f"{raw.grid_shape} with padding {raw.padding}")
    return ActivatedPixelParams(
        opacity=np.minimum(logistic(raw.opacity), _OPACITY_CAP),
        delta=delta, offset=offset, scale=np.exp(raw.scale), rotation=raw.rotation / qn,
        colour=raw.colour.copy(), padding=raw.padding, base_depth=base)


def padded_pixel_coords(cam: CameraIntrinsics, grid_shape, padding: int) -> np.ndarray:
    """Principal-point-centred coordinates of the padded grid, ``(Hp, Wp, 2)``."""
    Hp, Wp = grid_shape
    ys, xs = np.mgrid[0:Hp, 0:Wp].astype(np.float64)
    return np.stack([xs - padding - cam.cx, ys - padding - cam.cy], axis=-1)


def _quat_right_matrix(p: np.ndarray) -> np.ndarray:
    """Matrix ``Q`` with ``q ⊗ p = Q @ q``."""
    w, x, y, z = p
    return np.array([[w, -x, -y, -z],
                     [x, w, z, -y],
                     [y, -z, w, x],
                     [z, y, -x, w]])


@dataclass(eq=False)
class LayeredBuild:
    """Intermediate values kept for the backward pass."""

    act: ActivatedPixelParams
    raw: RawLayeredParams
    ray: np.ndarray  # (Hp, Wp, 3): d(mean_cam)/d(depth)
    cam: CameraIntrinsics
    source_pose: Pose
    offset_scale: float


def build_layered_scene(depth, raw: RawLayeredParams, cam: CameraIntrinsics,
                        source_pose: Pose | None = None, offset_scale: float = 1.0,
                        max_offset: float | None = None, return_build: bool = False):
    """Turn raw per-pixel layered parameters plus a depth map into a world-frame scene."""
    source_pose = source_pose or Pose.identity()
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != raw.image_shape:
        raise LayeredError(f"depth shape {depth.shape} does not match parameter image shape "
                           f"{raw.image_shape}")
    if (cam.height, cam.width) != depth.shape:
        raise LayeredError("camera size does not match the depth map")
    act = activate_params(raw, depth, offset_scale, max_offset)
    u = padded_pixel_coords(cam, raw.grid_shape, raw.padding)
    ray = np.stack([u[..., 0] / cam.fx, u[..., 1] / cam.fy, np.ones(u.shape[:2])], axis=-1)
    d = act.layer_depths()
    mean_cam = ray[None] * d[..., None] + act.offset
    world = source_pose.inverse()
    means = world.apply(mean_cam.reshape(-1, 3))
    rot = act.rotation.reshape(-1, 4)
    if not np.allclose(source_pose.rotation, [1, 0, 0, 0]):
        rot = rot @ _quat_right_matrix(source_pose.rotation).T
    B = act.colour.shape[-2]
    scene = GaussianScene(means, rot, act.scale.reshape(-1, 3), act.opacity.reshape(-1),
                          act.colour.reshape(-1, B, 3), raw.sh_degree)
    if return_build:
        return scene, LayeredBuild(act, raw, ray, cam, source_pose, offset_scale)
    return scene


def layered_backward(grads: SceneGradients, build: LayeredBuild) -> dict:
    """Chain scene-parameter gradients back to the raw layered parameters.

    Returns a dict keyed like :attr:`RawLayeredParams.arrays`. Gradients through
    an active ``max_offset`` clamp are not modelled.
    """
    act, raw = build.act, build.raw
    shape = raw.opacity.shape
    K = raw.n_layers
    R = build.source_pose.R
    g_mean_cam = (grads.means @ R.T).reshape(shape + (3,))  # world = R^T (cam - t)
    g_depth = np.sum(g_mean_cam * build.ray[None], axis=-1)
    out = {}
    out["offset"] = g_mean_cam * build.offset_scale
    if K > 1:
        # d_i depends on every delta_j with j <= i
        tail = np.cumsum(g_depth[::-1], axis=0)[::-1]
        sig = logistic(raw.delta_depth)
        out["delta_depth"] = tail[1:] * sig
    else:
        out["delta_depth"] = np.zeros_like(raw.delta_depth)
    s = act.opacity
    out["opacity"] = grads.opacities.reshape(shape) * s * (1 - s)
    out["scale"] = grads.scales.reshape(shape + (3,)) * act.scale
    g_rot = grads.rotations
    if not np.allclose(build.source_pose.rotation, [1, 0, 0, 0]):
        g_rot = g_rot @ _quat_right_matrix(build.source_pose.rotation)
    g_rot = g_rot.reshape(shape + (4,))
    norm = np.linalg.norm(raw.rotation, axis=-1, keepdims=True)
    qn = raw.rotation / norm
    out["rotation"] = (g_rot - qn * np.sum(g_rot * qn, axis=-1, keepdims=True)) / norm
    out["colour"] = grads.sh.reshape(raw.colour.shape)
    return out


@dataclass(eq=False)
class LayerDepthReport:
    depths: np.ndarray  # (K, Hp, Wp)
    opacities: np.ndarray  # (K, Hp, Wp)
    padding: int

    @property
    def n_layers(self) -> int:
        return self.depths.shape[0]

    def interior(self):
        """Depth and opacity maps restricted to the source image (padding removed)."""
        P = self.padding
        Hp, Wp = self.depths.shape[1:]
        sl = (slice(None), slice(P, Hp - P), slice(P, Wp - P))
        return self.depths[sl], self.opacities[sl]


def layer_depth_report(act: ActivatedPixelParams) -> LayerDepthReport:
    return LayerDepthReport(act.layer_depths(), act.opacity.copy(), act.padding)


def init_raw_params(image, depth, cam: CameraIntrinsics, n_layers: int = 2, padding: int = 0,
                    sh_degree: int = 0, first_opacity: float = 2.0, deeper_opacity: float = 0.0,
                    grey: float = 0.5) -> RawLayeredParams:
    """Initialization that starts as a faithful unprojection of the source view.

    Layer 1 copies the (edge-padded) source colours at opacity logit 2; deeper
    layers start grey at logit 0 with zero raw depth offsets. Variances give a
    1-pixel standard deviation at each layer's initial depth.
    """
    image = np.asarray(image, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if image.shape[:2] != depth.shape:
        raise LayeredError("image and depth sizes differ")
    if n_layers < 1:
        raise LayeredError("n_layers must be >= 1")
    D = pad_depth(depth, padding)
    Hp, Wp = D.shape
    K = n_layers
    B = num_basis(sh_degree)
    opacity = np.full((K, Hp, Wp), deeper_opacity)
    opacity[0] = first_opacity
    delta_raw = np.zeros((K - 1, Hp, Wp))
    layer_d = D[None] + np.concatenate([[0.0], np.cumsum(softplus(np.zeros(K - 1)))])[:, None, None]
    f = np.sqrt(cam.fx * cam.fy)
    scale = np.repeat(np.log((layer_d / f) ** 2)[..., None], 3, axis=-1)
    rotation = np.zeros((K, Hp, Wp, 4))
    rotation[..., 0] = 1.0
    colour = np.zeros((K, Hp, Wp, B, 3))
    img = np.pad(image[..., :3], ((padding, padding), (padding, padding), (0, 0)), mode="edge")
    colour[0, :, :, 0] = rgb_to_dc(img)
    colour[1:, :, :, 0] = rgb_to_dc(grey)
    return RawLayeredParams(opacity, delta_raw, np.zeros((K, Hp, Wp, 3)), scale, rotation, colour,
                            padding)

