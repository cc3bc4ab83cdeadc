import numpy as np
import pytest

from layersplat.baseline import (BaselineError, BaselineHyper, baseline_as_layered, baseline_loss, tune_baseline,
                                 unproject_baseline)
from layersplat.fitting import FitConfig
from layersplat.geometry import CameraIntrinsics, Pose
from layersplat.layered import build_layered_scene
from layersplat.objective import eval_pair
from layersplat.rasterizer import render
from layersplat.synthetic import TwoPlaneScene, look_pose


@pytest.fixture(scope="module")
def wall():
    cam = CameraIntrinsics.centered(96.0, 96, 64)
    img, depth = TwoPlaneScene(with_card=False).raycast(cam, Pose.identity())
    return cam, img, depth


class TestConstruction:
    def test_defaults(self):
        h = BaselineHyper()
        assert (h.alpha_colour, h.s0, h.sigma0, h.d0, h.mode) == (1.0, -4.5, 4.0, 10.0, "fixed")

    def test_count_and_closed_forms(self, rng):
        cam = CameraIntrinsics.centered(10.0, 5, 4)
        img = rng.uniform(0, 1, (4, 5, 3))
        depth = rng.uniform(1, 20, (4, 5))
        sc = unproject_baseline(img, depth, cam)
        assert sc.count == 20
        np.testing.assert_allclose(sc.opacities, 0.98201, atol=1e-5)
        np.testing.assert_allclose(sc.scales, np.exp(-4.5))
        np.testing.assert_allclose(sc.means[:, 2], depth.ravel(), rtol=1e-12)

    def test_depth_dependent_mode(self, rng):
        cam = CameraIntrinsics.centered(10.0, 3, 2)
        img = rng.uniform(0, 1, (2, 3, 3))
        depth = np.array([[10.0, 20.0, 5.0], [10.0, 1.0, 2.0]])
        sc = unproject_baseline(img, depth, cam, BaselineHyper(mode="depth_dependent"))
        np.testing.assert_allclose(sc.scales[:, 0], np.exp(-4.5) * depth.ravel() / 10.0, rtol=1e-12)
        assert sc.scales[0, 0] == pytest.approx(np.exp(-4.5))

    def test_colour_gain(self, rng):
        cam = CameraIntrinsics.centered(10.0, 3, 2)
        img = rng.uniform(0, 1, (2, 3, 3))
        a = unproject_baseline(img, np.ones((2, 3)), cam)
        b = unproject_baseline(img, np.ones((2, 3)), cam, BaselineHyper(alpha_colour=0.5))
        np.testing.assert_allclose(b.sh, 0.5 * a.sh, rtol=1e-12)

    def test_invalid(self, rng):
        cam = CameraIntrinsics.centered(10.0, 3, 2)
        img = rng.uniform(0, 1, (2, 3, 3))
        with pytest.raises(BaselineError):
            unproject_baseline(img, np.ones((2, 2)), cam)
        with pytest.raises(BaselineError):
            unproject_baseline(img, np.zeros((2, 3)), cam)
        with pytest.raises(BaselineError):
            BaselineHyper(mode="other")
        with pytest.raises(BaselineError):
            BaselineHyper(d0=0.0)


class TestFidelity:
    def test_source_view_psnr(self, wall):
        cam, img, depth = wall
        sc = unproject_baseline(img, depth, cam, BaselineHyper(s0=-8.0))
        rep = eval_pair(render(sc, cam, Pose.identity()).colour, img, 0.05)
        assert rep.psnr >= 40.0

    @pytest.mark.parametrize("mode", ["fixed", "depth_dependent"])
    def test_matches_one_layer_model(self, wall, mode):
        cam, img, depth = wall
        hyper = BaselineHyper(alpha_colour=0.9, s0=-7.0, sigma0=3.0, mode=mode)
        pose = look_pose((0.2, -0.1, 0.05))
        a = render(unproject_baseline(img, depth, cam, hyper), cam, pose).colour
        b = render(build_layered_scene(depth, baseline_as_layered(img, depth, cam, hyper), cam), cam, pose).colour
        assert np.abs(a - b).max() <= 1e-6


@pytest.fixture(scope="module")
def problem():
    cam = CameraIntrinsics.centered(32.0, 32, 24)
    img, depth = TwoPlaneScene(with_card=False).raycast(cam, Pose.identity())
    true = BaselineHyper(alpha_colour=0.8, s0=-6.0, sigma0=2.0)
    scene = unproject_baseline(img, depth, cam, true)
    poses = [look_pose(p) for p in ((-0.3, 0.0, 0.0), (0.3, 0.1, 0.0))]
    targets = [(render(scene, cam, p).colour, p) for p in poses]
    return cam, [(img, depth, targets)], true


class TestTuning:
    def test_recovers_generating_hypers(self, problem):
        cam, scenes, true = problem
        init = true.with_vector(true.vector() + 0.5)
        cfg = FitConfig(learning_rate=1e-2, steps=500, include_source=False)
        res = tune_baseline(scenes, cam, init, cfg)
        assert np.all(np.abs(res.hyper.vector() - true.vector()) <= 0.05)
        assert res.best_loss < baseline_loss(init, scenes, cam, cfg)

    def test_zero_steps_returns_init(self, problem):
        cam, scenes, true = problem
        init = true.with_vector(true.vector() + 0.5)
        assert tune_baseline(scenes, cam, init, FitConfig(steps=0)).hyper == init

    def test_needs_scenes(self, problem):
        with pytest.raises(BaselineError):
            tune_baseline([], problem[0])
