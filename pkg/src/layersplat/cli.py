"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error. ``eval`` and ``align``
print JSON on stdout; progress and diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import formats
from .alignment import RansacConfig, load_pairs, pairs_from_depth_map, scale_lsq, scale_ransac
from .autograd import finite_diff_check, linear_loss
from .baseline import MODES, BaselineHyper, unproject_baseline
from .fitting import FitConfig, fit_scene
from .geometry import CameraIntrinsics, Pose
from .layered import build_layered_scene
from .objective import eval_pair
from .rasterizer import RenderOptions, render
from .runtime import set_threads
from .synthetic import (HELDOUT_POSITIONS, TRAIN_POSITIONS, TwoPlaneScene,
                        gradcheck_case, make_two_plane_benchmark)

log = logging.getLogger("layersplat")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit_json(obj) -> None:
    json.dump(obj, sys.stdout, indent=1, allow_nan=True)
    sys.stdout.write("\n")


def _camera(args, shape=None) -> CameraIntrinsics:
    if args.camera:
        cam = formats.read_camera(args.camera)
    elif shape is not None:
        H, W = shape
        cam = CameraIntrinsics.centered(args.focal or float(W), W, H)
    else:
        raise UsageError("--camera is required")
    if shape is not None and (cam.height, cam.width) != tuple(shape):
        raise ValueError(f"camera is {cam.width}x{cam.height} but the image is {shape[1]}x{shape[0]}")
    return cam


def _pose(values) -> Pose:
    if values is None:
        return Pose.identity()
    M = np.asarray(values, dtype=np.float64).reshape(3, 4)
    return Pose.from_matrix34(np.concatenate([formats.orthonormalize(M[:, :3], "--pose: "), M[:, 3:]], 1))


def _render_opts(args) -> RenderOptions:
    return RenderOptions(tile_size=args.tile_size)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_make_synthetic(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bm = make_two_plane_benchmark(args.width, args.height, args.focal, seed=args.seed)
    formats.write_image(out / "source.png", bm.source_image)
    formats.write_pfm(out / "source_depth.pfm", bm.source_depth)
    formats.write_camera(out / "camera.json", bm.cam)
    for name, views in (("train", bm.train), ("heldout", bm.heldout)):
        entries = []
        for i, (img, pose) in enumerate(views):
            fn = f"{name}_{i}.png"
            formats.write_image(out / fn, img)
            entries.append((fn, pose))
        formats.write_targets(out / f"{name}.txt", entries)
    # an occlusion-free variant for source-view consistency checks
    wall = TwoPlaneScene(seed=args.seed, with_card=False)
    img, depth = wall.raycast(bm.cam, Pose.identity())
    formats.write_image(out / "wall.png", img)
    formats.write_pfm(out / "wall_depth.pfm", depth)
    log.info("wrote two-plane benchmark (%d train, %d held-out views) to %s",
             len(TRAIN_POSITIONS), len(HELDOUT_POSITIONS), out)
    return EXIT_OK


def cmd_unproject(args) -> int:
    image = formats.read_image(args.image)
    depth = formats.read_depth(args.depth)
    cam = _camera(args, depth.shape)
    hyper = BaselineHyper(args.alpha_colour, args.s0, args.sigma0, args.d0, args.mode)
    scene = unproject_baseline(image, depth, cam, hyper)
    formats.write_scene(scene, args.output)
    log.info("wrote %d Gaussians to %s", scene.count, args.output)
    return EXIT_OK


def cmd_fit(args) -> int:
    source = formats.read_image(args.source)
    depth = formats.read_depth(args.depth)
    cam = _camera(args, depth.shape)
    targets = [(formats.read_image(p), pose) for p, pose in formats.load_targets(args.targets)]
    base = FitConfig.desk if args.preset == "desk" else FitConfig
    overrides = {"steps": args.steps, "n_layers": args.layers, "padding": args.padding,
                 "sh_degree": args.sh_degree, "seed": args.seed, "render": _render_opts(args)}
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    cfg = base(**overrides)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()

    def progress(step, loss, gnorm):
        if step % args.log_every == 0 or step == cfg.steps - 1:
            print(f"step {step:5d}  loss {loss:.6f}  |g| {gnorm:.4g}  {time.time() - t0:.1f}s",
                  file=sys.stderr, flush=True)

    res = fit_scene(source, depth, targets, cam, cfg, callback=progress)
    formats.save_params(out / "params.npz", res.params)
    formats.write_scene(build_layered_scene(depth, res.params, cam, offset_scale=cfg.offset_scale),
                        out / "scene.fl3d")
    with open(out / "loss_history.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows(enumerate(res.history))
    metrics = [dict(m.to_dict(), target=i) for i, m in enumerate(res.metrics)]
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1))
    log.info("fit finished in %.1fs; outputs in %s", time.time() - t0, out)
    return EXIT_OK


def cmd_render(args) -> int:
    scene = formats.read_scene(args.scene)
    cam = _camera(args)
    out = render(scene, cam, _pose(args.pose), _render_opts(args))
    formats.write_image(args.output, out.colour)
    return EXIT_OK


def cmd_eval(args) -> int:
    pred = formats.read_image(args.pred)
    gt = formats.read_image(args.gt)
    _emit_json(eval_pair(pred, gt, args.crop).to_dict())
    return EXIT_OK


def cmd_align(args) -> int:
    if args.pairs:
        d_pred, d_ref = load_pairs(args.pairs)
    elif args.depth and args.points:
        d_pred, d_ref = pairs_from_depth_map(formats.read_depth(args.depth), np.loadtxt(args.points, ndmin=2))
    else:
        raise UsageError("give a pair list, or --depth with --points")
    cfg = RansacConfig(args.sample_size, args.iterations, args.threshold, args.seed)
    res = scale_ransac(d_pred, d_ref, cfg)
    _emit_json({"scale": res.scale, "inliers": int(res.inliers.size), "pairs": int(np.size(d_pred)),
                "lsq_scale": scale_lsq(d_pred, d_ref)})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    scene, cam, pose, weights = gradcheck_case(args.seed, args.count, args.sh_degree, args.width,
                                               args.height, args.focal)
    report = finite_diff_check(scene, cam, pose, linear_loss(weights), h=args.step,
                               opts=_render_opts(args))
    worst = 0.0
    for name, e in report.items():
        worst = max(worst, e.max_rel_error)
        print(f"{name:10s} max rel err {e.max_rel_error:.3e}  checked {e.n_checked}  "
              f"skipped {e.n_skipped}", file=sys.stderr)
    ok = worst <= args.tol
    print(f"gradient check {'passed' if ok else 'FAILED'} (tolerance {args.tol:g})", file=sys.stderr)
    return EXIT_OK if ok else EXIT_DATA


def cmd_export_ply(args) -> int:
    formats.export_ply(formats.read_scene(args.scene), args.output)
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="layersplat", description="Layered Gaussian splatting from a single view plus depth.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="kernel worker threads (default: $LAYERSPLAT_THREADS or all CPUs)")
    p.add_argument("--tile-size", type=int, default=16)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def camera_flags(sp, focal=True):
        sp.add_argument("--camera", help="intrinsics JSON (fx, fy, cx, cy, width, height)")
        if focal:
            sp.add_argument("--focal", type=float, help="focal length in pixels when no --camera "
                            "(principal point at the image centre; default: image width)")

    sp = sub.add_parser("make-synthetic", help="write the seeded two-plane benchmark")
    sp.add_argument("out_dir")
    sp.add_argument("--width", type=int, default=96)
    sp.add_argument("--height", type=int, default=64)
    sp.add_argument("--focal", type=float, default=None)
    sp.set_defaults(func=cmd_make_synthetic)

    sp = sub.add_parser("unproject", help="per-pixel baseline scene from an image and depth map")
    sp.add_argument("image")
    sp.add_argument("depth", help=".pfm or 16-bit .png with a .json scale sidecar")
    sp.add_argument("-o", "--output", required=True)
    camera_flags(sp)
    d = BaselineHyper()
    sp.add_argument("--alpha-colour", type=float, default=d.alpha_colour)
    sp.add_argument("--s0", type=float, default=d.s0, help="log variance")
    sp.add_argument("--sigma0", type=float, default=d.sigma0, help="opacity logit")
    sp.add_argument("--d0", type=float, default=d.d0)
    sp.add_argument("--mode", choices=MODES, default=d.mode)
    sp.set_defaults(func=cmd_unproject)

    sp = sub.add_parser("fit", help="fit layered parameters to target views")
    sp.add_argument("source")
    sp.add_argument("depth")
    sp.add_argument("targets", help="text file: image path and 12 camera-from-world values per line")
    sp.add_argument("--out-dir", required=True)
    camera_flags(sp)
    sp.add_argument("--preset", choices=("desk", "default"), default="desk")
    sp.add_argument("--steps", type=int, default=2000)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--layers", type=int, default=2)
    sp.add_argument("--padding", type=int, default=4)
    sp.add_argument("--sh-degree", type=int, default=0, choices=range(4))
    sp.add_argument("--log-every", type=int, default=100)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("render", help="render a scene file")
    sp.add_argument("scene")
    sp.add_argument("-o", "--output", required=True)
    camera_flags(sp, focal=False)
    sp.add_argument("--pose", type=float, nargs=12, metavar="V",
                    help="3x4 camera-from-world matrix, row-major (default identity)")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval", help="PSNR/SSIM of a prediction against ground truth")
    sp.add_argument("pred")
    sp.add_argument("gt")
    sp.add_argument("--crop", type=float, default=0.05)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("align", help="scale between predicted and reference depths")
    sp.add_argument("pairs", nargs="?", help="text file: d_pred d_ref per line")
    sp.add_argument("--depth", help="predicted depth map")
    sp.add_argument("--points", help="text file: u v d_ref per line")
    r = RansacConfig()
    sp.add_argument("--sample-size", type=int, default=r.sample_size)
    sp.add_argument("--iterations", type=int, default=r.iterations)
    sp.add_argument("--threshold", type=float, default=r.threshold)
    sp.set_defaults(func=cmd_align)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the renderer gradients")
    sp.add_argument("--count", type=int, default=50)
    sp.add_argument("--width", type=int, default=48)
    sp.add_argument("--height", type=int, default=32)
    sp.add_argument("--focal", type=float, default=48.0)
    sp.add_argument("--sh-degree", type=int, default=1, choices=range(4))
    sp.add_argument("--step", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("export-ply", help="convert a scene file to a splat PLY")
    sp.add_argument("scene")
    sp.add_argument("output")
    sp.set_defaults(func=cmd_export_ply)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if args.tile_size < 1:
            raise UsageError("--tile-size must be >= 1")
        set_threads(args.threads)
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as e:
        print(f"{parser.prog}: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
