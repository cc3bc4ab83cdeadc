import numpy as np
import pytest

from layersplat.autograd import render_backward
from layersplat.geometry import CameraIntrinsics, Pose, project_points, to_centered
from layersplat.layered import (LayeredError, RawLayeredParams, activate_params, build_layered_scene,
                                channels_per_layer, init_raw_params, layer_depth_report, layered_backward)
from layersplat.objective import photometric_loss
from layersplat.rasterizer import render_with_context
from layersplat.synthetic import small_pose


def zero_params(K, H, W, P=0, B=1):
    Hp, Wp = H + 2 * P, W + 2 * P
    rot = np.zeros((K, Hp, Wp, 4))
    rot[..., 0] = 1.0
    return RawLayeredParams(np.zeros((K, Hp, Wp)), np.zeros((K - 1, Hp, Wp)), np.zeros((K, Hp, Wp, 3)),
                            np.zeros((K, Hp, Wp, 3)), rot, np.zeros((K, Hp, Wp, B, 3)), P)


def random_params(rng, K, H, W, P, L=0):
    p = zero_params(K, H, W, P, (L + 1) ** 2)
    return p.with_arrays({
        "opacity": rng.normal(size=p.opacity.shape),
        "delta_depth": rng.normal(size=p.delta_depth.shape),
        "offset": 0.05 * rng.normal(size=p.offset.shape),
        "scale": rng.uniform(-7.5, -6.5, p.scale.shape),
        "rotation": rng.normal(size=p.rotation.shape),
        "colour": rng.uniform(0.5, 2.0, p.colour.shape),
    })


class TestActivation:
    def test_closed_forms(self):
        act = activate_params(zero_params(2, 2, 2))
        assert np.all(act.opacity == 0.5)
        assert np.all(act.scale == 1.0)
        np.testing.assert_allclose(act.delta[1], np.log(2.0), rtol=1e-15)
        assert np.all(act.delta[0] == 0)

    def test_saturated_opacity_stays_below_one(self):
        p = zero_params(1, 2, 2)
        act = activate_params(p.with_arrays({"opacity": np.full((1, 2, 2), 60.0)}))
        assert np.all(act.opacity < 1.0)
        act = activate_params(p.with_arrays({"opacity": np.full((1, 2, 2), -60.0)}))
        assert np.all(act.opacity < 1e-20)

    def test_rejects_bad_raw(self):
        p = zero_params(2, 2, 2)
        with pytest.raises(LayeredError):
            activate_params(p.with_arrays({"rotation": np.zeros((2, 2, 2, 4))}))
        with pytest.raises(LayeredError):
            activate_params(p.with_arrays({"scale": np.full((2, 2, 2, 3), np.nan)}))
        with pytest.raises(LayeredError):
            RawLayeredParams(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), *[getattr(p, k) for k in
                             ("offset", "scale", "rotation", "colour")])

    def test_channel_count(self):
        assert channels_per_layer(0) == 14 and channels_per_layer(0, first_layer=False) == 15
        assert zero_params(2, 2, 2, B=4).total_channels() == 2 * channels_per_layer(1) + 1


class TestBuild:
    def test_counts(self):
        cam = CameraIntrinsics.centered(1.0, 2, 2)
        assert build_layered_scene(np.ones((2, 2)), zero_params(2, 2, 2, 0), cam).count == 8
        assert build_layered_scene(np.ones((2, 2)), zero_params(2, 2, 2, 1), cam).count == 32

    def test_layer_two_mean(self):
        cam = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, 1, 1)
        p = zero_params(2, 1, 1)
        p = p.with_arrays({"delta_depth": np.full((1, 1, 1), np.log(np.expm1(0.7)))})
        sc = build_layered_scene(np.full((1, 1), 3.0), p, cam)
        np.testing.assert_allclose(sc.means[1], [0.0, 0.0, 3.7], atol=1e-12)

    def test_layer1_reprojects_to_pixel(self, rng):
        cam = CameraIntrinsics.centered(30.0, 12, 9)
        depth = rng.uniform(1, 5, (9, 12))
        sc = build_layered_scene(depth, zero_params(2, 9, 12, 3), cam)
        Hp, Wp = 15, 18
        px, z, _ = project_points(cam, Pose.identity(), sc.means[:Hp * Wp])
        ys, xs = np.mgrid[0:Hp, 0:Wp]
        np.testing.assert_allclose(px[:, 0], (xs - 3).ravel(), atol=1e-6)
        np.testing.assert_allclose(px[:, 1], (ys - 3).ravel(), atol=1e-6)

    def test_edge_padded_depth(self, rng):
        cam = CameraIntrinsics.centered(30.0, 5, 4)
        depth = rng.uniform(1, 5, (4, 5))
        act = activate_params(zero_params(1, 4, 5, 2), depth)
        np.testing.assert_array_equal(act.base_depth[:2, :2], depth[0, 0])
        np.testing.assert_array_equal(act.base_depth[2:-2, 2:-2], depth)

    def test_source_pose_moves_scene_rigidly(self, rng):
        cam = CameraIntrinsics.centered(30.0, 6, 5)
        depth = rng.uniform(1, 5, (5, 6))
        p = random_params(rng, 2, 5, 6, 1)
        pose = small_pose(rng, 0.3, 0.5)
        a = build_layered_scene(depth, p, cam)
        b = build_layered_scene(depth, p, cam, source_pose=pose)
        np.testing.assert_allclose(pose.apply(b.means), a.means, atol=1e-12)
        np.testing.assert_allclose(b.covariances(), np.einsum("ji,njk,kl->nil", pose.R, a.covariances(), pose.R),
                                   atol=1e-12)

    def test_depth_mismatch(self):
        cam = CameraIntrinsics.centered(1.0, 2, 2)
        with pytest.raises(LayeredError):
            build_layered_scene(np.ones((3, 2)), zero_params(1, 2, 2), cam)
        with pytest.raises(LayeredError):
            build_layered_scene(np.zeros((2, 2)), zero_params(1, 2, 2), cam)


class TestDepthReport:
    def test_single_layer(self, rng):
        depth = rng.uniform(1, 3, (3, 4))
        rep = layer_depth_report(activate_params(zero_params(1, 3, 4), depth))
        assert rep.n_layers == 1
        np.testing.assert_array_equal(rep.depths[0], depth)

    def test_constant_offset(self, rng):
        depth = rng.uniform(1, 3, (3, 4))
        p = zero_params(2, 3, 4).with_arrays({"delta_depth": np.full((1, 3, 4), np.log(np.expm1(1.0)))})
        d, _ = layer_depth_report(activate_params(p, depth)).interior()
        np.testing.assert_allclose(d[1], depth + 1.0, rtol=1e-15)

    def test_black_when_transparent(self):
        p = zero_params(2, 3, 4).with_arrays({"opacity": np.full((2, 3, 4), -50.0)})
        _, op = layer_depth_report(activate_params(p, np.ones((3, 4)))).interior()
        assert np.all(op < 1e-20)

    def test_ordering_holds_for_any_raw(self, rng):
        for K in (2, 3, 4):
            p = random_params(rng, K, 5, 6, 1).with_arrays(
                {"delta_depth": rng.normal(scale=20, size=(K - 1, 7, 8))})
            d = layer_depth_report(activate_params(p, rng.uniform(1, 5, (5, 6)))).depths
            assert np.all(np.diff(d, axis=0) >= 0)
            small = np.abs(p.delta_depth) < 30
            assert np.all(np.diff(d, axis=0)[small] > 0)


class TestInit:
    def test_init_is_unprojection(self, rng):
        cam = CameraIntrinsics.centered(20.0, 8, 6)
        img = rng.uniform(0, 1, (6, 8, 3))
        depth = rng.uniform(1, 4, (6, 8))
        p = init_raw_params(img, depth, cam, n_layers=2, padding=1)
        act = activate_params(p, depth)
        np.testing.assert_allclose(act.opacity[0], 1 / (1 + np.exp(-2.0)))
        np.testing.assert_allclose(act.scale[0, 1:-1, 1:-1, 0], (depth / 20.0) ** 2)
        d = act.layer_depths()
        np.testing.assert_allclose(act.scale[1, ..., 0], (d[1] / 20.0) ** 2)


class TestLayeredBackward:
    def test_raw_gradients_match_finite_differences(self, rng):
        cam = CameraIntrinsics.centered(24.0, 14, 12)
        depth = rng.uniform(2.0, 3.0, (12, 14))
        p = random_params(rng, 2, 12, 14, 1, L=1)
        src = small_pose(rng, 0.05, 0.1)
        view = small_pose(rng, 0.05, 0.2).compose(src)
        target = rng.uniform(0, 1, (12, 14, 3))

        def loss_of(params):
            sc = build_layered_scene(depth, params, cam, src)
            out, ctx = render_with_context(sc, cam, view)
            return photometric_loss(out.colour, target), sc, ctx

        (loss, g_img), sc, ctx = loss_of(p)
        key = ctx.structure_key()
        _, build = build_layered_scene(depth, p, cam, src, return_build=True)
        grads = layered_backward(render_backward(sc, cam, view, g_img, ctx=ctx), build)
        h = 1e-6
        for name, arr in p.arrays().items():
            flat = arr.reshape(-1)
            idx = rng.choice(flat.size, size=min(25, flat.size), replace=False)
            scale = np.abs(grads[name]).max()
            for i in idx:
                vals = []
                for sgn in (1, -1):
                    a = flat.copy()
                    a[i] += sgn * h
                    (l, _), _, c = loss_of(p.with_arrays({name: a.reshape(arr.shape)}))
                    vals.append((l, c.structure_key()))
                if any(k != key for _, k in vals):
                    continue
                fd = (vals[0][0] - vals[1][0]) / (2 * h)
                an = grads[name].reshape(-1)[i]
                assert abs(an - fd) <= 1e-3 * max(abs(an), abs(fd), 1e-2 * scale, 1e-9), (name, i, an, fd)
