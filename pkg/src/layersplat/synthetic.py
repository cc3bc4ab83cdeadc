"""Seeded synthetic scenes: random Gaussian mixtures and the two-plane occlusion benchmark."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CameraIntrinsics, Pose, pixel_grid, to_centered, unproject_pixel
from .scene import GaussianScene
from .sh import num_basis, rgb_to_dc


def random_scene(rng: np.random.Generator, n: int, cam: CameraIntrinsics, sh_degree: int = 0,
                 depth_range=(2.0, 6.0), footprint_px=(0.7, 4.0),
                 opacity_range=(0.05, 0.9)) -> GaussianScene:
    """Random Gaussians whose means project inside ``cam`` from the identity pose."""
    px = np.stack([rng.uniform(0, cam.width - 1, n), rng.uniform(0, cam.height - 1, n)], axis=1)
    d = rng.uniform(*depth_range, n)
    means = unproject_pixel(cam, to_centered(cam, px), d)
    std_px = rng.uniform(*footprint_px, (n, 3))
    scales = (std_px * d[:, None] / cam.fx) ** 2
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    opac = rng.uniform(*opacity_range, n)
    sh = np.zeros((n, num_basis(sh_degree), 3))
    sh[:, 0] = rgb_to_dc(rng.uniform(0.15, 0.85, (n, 3)))
    if sh_degree > 0:
        sh[:, 1:] = rng.uniform(-0.1, 0.1, (n, sh.shape[1] - 1, 3))
    return GaussianScene(means, rotations, scales, opac, sh, sh_degree)


def small_pose(rng: np.random.Generator, max_angle: float = 0.05, max_shift: float = 0.2) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = rng.uniform(-max_angle, max_angle)
    q = np.concatenate([[np.cos(ang / 2)], np.sin(ang / 2) * axis])
    return Pose(q, rng.uniform(-max_shift, max_shift, 3))


# ---------------------------------------------------------------------------
# Two-plane occlusion benchmark
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TwoPlaneScene:
    """A frontal textured card in front of a frontal textured wall.

    Colours are smooth procedural textures defined on each plane, so any
    camera can be ray-cast exactly.
    """

    front_depth: float = 3.0
    back_depth: float = 6.0
    # card extent in world x/y (metres), centred slightly left of the optical axis
    card_x: tuple = (-0.9, 0.3)
    card_y: tuple = (-0.55, 0.45)
    seed: int = 0
    with_card: bool = True  # False leaves only the wall: no depth discontinuities

    def _texture_params(self):
        rng = np.random.default_rng(self.seed)
        return {
            "front": (rng.uniform(0.3, 0.7, 3), rng.uniform(0.1, 0.2, 3),
                      rng.uniform(1.5, 3.0, (3, 2)), rng.uniform(0, 2 * np.pi, 3)),
            "back": (rng.uniform(0.3, 0.7, 3), rng.uniform(0.1, 0.2, 3),
                     rng.uniform(0.8, 2.0, (3, 2)), rng.uniform(0, 2 * np.pi, 3)),
        }

    def texture(self, which: str, xy: np.ndarray) -> np.ndarray:
        base, amp, freq, phase = self._texture_params()[which]
        arg = xy[..., None, 0] * freq[:, 0] + xy[..., None, 1] * freq[:, 1] + phase
        return base + amp * np.sin(arg)

    def raycast(self, cam: CameraIntrinsics, pose: Pose):
        """Exact image and view-space depth from ``pose``."""
        H, W = cam.height, cam.width
        u = to_centered(cam, pixel_grid(H, W))
        dirs_cam = np.concatenate([u[..., 0:1] / cam.fx, u[..., 1:2] / cam.fy, np.ones((H, W, 1))], -1)
        Rwc = pose.R.T
        origin = pose.camera_center
        dirs = dirs_cam @ Rwc.T
        t_front = (self.front_depth - origin[2]) / dirs[..., 2]
        hit_f = origin + t_front[..., None] * dirs
        on_card = ((hit_f[..., 0] >= self.card_x[0]) & (hit_f[..., 0] <= self.card_x[1])
                   & (hit_f[..., 1] >= self.card_y[0]) & (hit_f[..., 1] <= self.card_y[1]) & (t_front > 0) & self.with_card)
        t_back = (self.back_depth - origin[2]) / dirs[..., 2]
        hit_b = origin + t_back[..., None] * dirs
        img = np.where(on_card[..., None], self.texture("front", hit_f[..., :2]),
                       self.texture("back", hit_b[..., :2]))
        hit = np.where(on_card[..., None], hit_f, hit_b)
        depth = pose.apply(hit.reshape(-1, 3))[:, 2].reshape(H, W)
        return np.clip(img, 0.0, 1.0), depth


@dataclass
class Benchmark:
    cam: CameraIntrinsics
    source_image: np.ndarray
    source_depth: np.ndarray
    train: list  # [(image, Pose)]
    heldout: list  # [(image, Pose)]
    scene: TwoPlaneScene


def look_pose(position) -> Pose:
    """Camera at world ``position`` looking along +z (no rotation)."""
    c = np.asarray(position, dtype=np.float64)
    return Pose(np.array([1.0, 0.0, 0.0, 0.0]), -c)


TRAIN_POSITIONS = ((-0.25, 0.0, 0.0), (0.25, 0.05, 0.0), (0.0, -0.15, 0.1))
HELDOUT_POSITIONS = ((0.12, -0.06, 0.05),)


def make_two_plane_benchmark(width: int = 96, height: int = 64, focal: float | None = None,
                             seed: int = 0) -> Benchmark:
    cam = CameraIntrinsics.centered(focal or 1.0 * width, width, height)
    scene = TwoPlaneScene(seed=seed)
    src, depth = scene.raycast(cam, Pose.identity())
    train = [(scene.raycast(cam, look_pose(p))[0], look_pose(p)) for p in TRAIN_POSITIONS]
    held = [(scene.raycast(cam, look_pose(p))[0], look_pose(p)) for p in HELDOUT_POSITIONS]
    return Benchmark(cam, src, depth, train, held, scene)


def gradcheck_case(seed: int, n: int = 50, sh_degree: int = 1, width: int = 48, height: int = 32,
                   focal: float = 48.0):
    """Seeded ``(scene, cam, pose, weights)`` for finite-difference gradient checks.

    Depths of 7-12 m with footprints of at least one pixel keep every variance
    above ~0.02 m^2, so a 1e-5 central-difference step stays well resolved.
    """
    rng = np.random.default_rng(seed)
    cam = CameraIntrinsics.centered(focal, width, height)
    scene = random_scene(rng, n, cam, sh_degree, depth_range=(7.0, 12.0), footprint_px=(1.0, 4.0))
    pose = small_pose(rng, max_shift=0.5)
    weights = rng.normal(size=(height, width, 3))
    return scene, cam, pose, weights
