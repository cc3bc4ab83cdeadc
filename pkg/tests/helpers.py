import numpy as np

from layersplat.geometry import CameraIntrinsics, to_centered, unproject_pixel
from layersplat.scene import GaussianScene
from layersplat.sh import rgb_to_dc


def splats_at(cam: CameraIntrinsics, pixels, depths, opacities, colours, std_px=1.0):
    """Isotropic Gaussians whose means project exactly onto ``pixels`` (identity pose)."""
    pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
    depths = np.asarray(depths, dtype=float).reshape(-1)
    means = unproject_pixel(cam, to_centered(cam, pixels), depths)
    var = (std_px * depths / cam.fx) ** 2
    n = len(depths)
    return GaussianScene(means, np.tile([1.0, 0, 0, 0], (n, 1)), np.repeat(var[:, None], 3, 1),
                         np.asarray(opacities, dtype=float).reshape(n),
                         rgb_to_dc(np.asarray(colours, dtype=float).reshape(n, 1, 3)), 0)
