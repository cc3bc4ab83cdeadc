import numpy as np
import pytest

from layersplat.geometry import CameraIntrinsics, Pose
from layersplat.rasterizer import (RenderError, RenderOptions, project_gaussian, project_scene, render,
                                   render_reference, render_with_context)
from layersplat.runtime import set_threads
from layersplat.scene import Gaussian3D, GaussianScene
from layersplat.synthetic import random_scene, small_pose

from helpers import splats_at

RED, GREEN = (1.0, 0.0, 0.0), (0.0, 1.0, 0.0)


def iso(z, s, x=0.0, y=0.0):
    return Gaussian3D(np.array([x, y, z]), np.array([1.0, 0, 0, 0]), np.full(3, s), 0.5, np.zeros((1, 3)))


class TestProjectGaussian:
    def test_on_axis_closed_form(self):
        cam = CameraIntrinsics(50.0, 50.0, 20.0, 15.0, 41, 31)
        sp = project_gaussian(iso(4.0, 0.01), cam, Pose.identity())
        np.testing.assert_allclose(sp.mean2d, [20.0, 15.0], atol=1e-12)
        k = 50.0**2 * 0.01 / 16.0
        np.testing.assert_allclose(sp.cov2d, (k + 0.3) * np.eye(2), atol=1e-12)
        assert sp.view_depth == 4.0

    def test_doubling_depth_quarters_footprint(self):
        cam = CameraIntrinsics(50.0, 50.0, 20.0, 15.0, 41, 31)
        a = project_gaussian(iso(2.0, 0.01), cam, Pose.identity()).cov2d - 0.3 * np.eye(2)
        b = project_gaussian(iso(4.0, 0.01), cam, Pose.identity()).cov2d - 0.3 * np.eye(2)
        np.testing.assert_allclose(b, a / 4, rtol=1e-12)

    def test_culling(self, small_cam):
        assert project_gaussian(iso(-1.0, 0.01), small_cam, Pose.identity()) is None
        assert project_gaussian(iso(2.0, 1e-4, x=50.0), small_cam, Pose.identity()) is None


class TestClosedForms:
    def test_empty_scene(self, small_cam):
        out = render(GaussianScene.empty(), small_cam, Pose.identity())
        assert np.all(out.colour == 0) and np.all(out.alpha == 0) and np.all(out.transmittance == 1)
        out = render(GaussianScene.empty(), small_cam, Pose.identity(), RenderOptions(background=(0.1, 0.2, 0.3)))
        np.testing.assert_array_equal(out.colour[3, 4], [0.1, 0.2, 0.3])
        ref = render_reference(GaussianScene.empty(), small_cam, Pose.identity())
        np.testing.assert_array_equal(ref.colour, 0.0)

    @pytest.mark.parametrize("renderer", [render, render_reference])
    def test_single_splat(self, small_cam, renderer):
        c = np.array([0.3, 0.6, 0.9])
        sc = splats_at(small_cam, [[5, 7]], [2.0], [0.9], [c])
        out = renderer(sc, small_cam, Pose.identity())
        np.testing.assert_allclose(out.colour[7, 5], 0.9 * c, atol=1e-9)
        assert out.alpha[7, 5] == pytest.approx(0.9, abs=1e-9)
        assert out.expected_depth[7, 5] == pytest.approx(2.0, abs=1e-12)

    @pytest.mark.parametrize("renderer", [render, render_reference])
    def test_two_splats(self, small_cam, renderer):
        sc = splats_at(small_cam, [[5, 7], [5, 7]], [3.0, 2.0], [0.8, 0.6], [GREEN, RED])
        out = renderer(sc, small_cam, Pose.identity())
        np.testing.assert_allclose(out.colour[7, 5], [0.6, 0.32, 0.0], atol=1e-9)
        assert out.alpha[7, 5] == pytest.approx(0.92, abs=1e-9)

    def test_depth_ties_break_by_index(self, small_cam):
        sc = splats_at(small_cam, [[5, 7], [5, 7]], [2.0, 2.0], [0.5, 0.5], [RED, GREEN])
        out = render(sc, small_cam, Pose.identity())
        np.testing.assert_allclose(out.colour[7, 5], [0.5, 0.25, 0.0], atol=1e-12)

    def test_alpha_clamp(self, small_cam):
        sc = splats_at(small_cam, [[5, 7]], [2.0], [0.9999], [RED])
        assert render(sc, small_cam, Pose.identity()).alpha[7, 5] == pytest.approx(0.99, abs=1e-12)

    def test_monotone_occlusion(self, small_cam):
        prev = np.inf
        for op in np.linspace(0.0, 0.98, 15):
            sc = splats_at(small_cam, [[5, 7], [6, 8]], [3.0, 2.0], [0.8, op], [GREEN, RED], std_px=1.5)
            green = render(sc, small_cam, Pose.identity()).colour[..., 1]
            assert np.all(green <= prev + 1e-15)
            prev = green

    def test_zero_size_image(self):
        class Cam:
            width, height, fx, fy, cx, cy = 0, 0, 1.0, 1.0, 0.0, 0.0
        with pytest.raises(RenderError):
            render(GaussianScene.empty(), Cam(), Pose.identity())


class TestProperties:
    def test_oracle_equivalence(self, rng):
        cam = CameraIntrinsics.centered(60.0, 48, 32)
        for L in (0, 1):
            sc = random_scene(rng, 200, cam, sh_degree=L)
            pose = small_pose(rng)
            a = render(sc, cam, pose)
            b = render_reference(sc, cam, pose)
            assert np.max(np.abs(a.colour - b.colour)) < 1e-9
            assert np.max(np.abs(a.alpha - b.alpha)) < 1e-9

    def test_alpha_range_and_telescoping(self, rng):
        cam = CameraIntrinsics.centered(60.0, 48, 32)
        out = render(random_scene(rng, 300, cam), cam, Pose.identity())
        assert np.all((out.alpha >= 0) & (out.alpha <= 1))
        np.testing.assert_allclose(out.alpha + out.transmittance, 1.0, atol=1e-9)
        assert np.all(np.isfinite(out.colour)) and np.all(out.expected_depth[out.alpha == 0] == 0)

    def test_bit_identical_across_tiles_and_threads(self, rng, restore_threads):
        cam = CameraIntrinsics.centered(60.0, 50, 37)  # sizes not divisible by the tiles
        sc = random_scene(rng, 300, cam, sh_degree=1)
        pose = small_pose(rng)
        base = render(sc, cam, pose, RenderOptions(tile_size=16))
        for threads in (1, 4, 8):
            set_threads(threads)
            for ts in (8, 16, 32):
                out = render(sc, cam, pose, RenderOptions(tile_size=ts))
                for f in ("colour", "alpha", "expected_depth", "transmittance"):
                    assert np.array_equal(getattr(out, f), getattr(base, f)), (threads, ts, f)

    def test_projection_culls_behind_camera(self, rng, small_cam):
        sc = random_scene(rng, 10, small_cam)
        moved = sc.replace(means=sc.means * np.array([1, 1, -1]))
        p = project_scene(moved, small_cam, Pose.identity())
        assert not p.visible.any()
        out, ctx = render_with_context(moved, small_cam, Pose.identity())
        assert ctx.order.size == 0 and np.all(out.alpha == 0)
