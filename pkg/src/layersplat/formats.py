"""File formats: binary scene files, splat PLY, depth maps, images, camera trajectories."""

from __future__ import annotations

import json
import logging
import struct
import warnings
from pathlib import Path

import numpy as np
from PIL import Image
from plyfile import PlyData, PlyElement

from .geometry import CameraIntrinsics, Pose
from .layered import RAW_CLASSES, RawLayeredParams
from .scene import GaussianScene
from .sh import degree_from_basis, num_basis

log = logging.getLogger(__name__)


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Binary scene file
# ---------------------------------------------------------------------------

SCENE_MAGIC = b"FL3D"
SCENE_VERSION = 1
_HEADER = struct.Struct("<4sHHQ")  # magic, version, sh_degree, count


def record_floats(sh_degree: int) -> int:
    return 3 + 4 + 3 + 1 + 3 * num_basis(sh_degree)


def scene_to_bytes(scene: GaussianScene) -> bytes:
    rec = np.concatenate([scene.means, scene.rotations, scene.scales, scene.opacities[:, None],
                          scene.sh.reshape(scene.count, 3 * scene.sh.shape[1])], axis=1)
    return (_HEADER.pack(SCENE_MAGIC, SCENE_VERSION, scene.sh_degree, scene.count)
            + rec.astype("<f4").tobytes())


def scene_from_bytes(data: bytes, name: str = "<bytes>") -> GaussianScene:
    if len(data) < _HEADER.size:
        raise FormatError(f"{name}: truncated header ({len(data)} bytes)")
    magic, version, degree, count = _HEADER.unpack_from(data)
    if magic != SCENE_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}, expected {SCENE_MAGIC!r}")
    if version != SCENE_VERSION:
        raise FormatError(f"{name}: unsupported version {version}")
    if degree > 3:
        raise FormatError(f"{name}: SH degree {degree} out of range")
    nf = record_floats(degree)
    expected = _HEADER.size + 4 * nf * count
    if len(data) != expected:
        raise FormatError(f"{name}: expected {expected} bytes for {count} Gaussians, found {len(data)}")
    rec = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(count, nf).astype(np.float64)
    try:
        return GaussianScene(rec[:, 0:3], rec[:, 3:7], rec[:, 7:10], rec[:, 10],
                             rec[:, 11:].reshape(count, num_basis(degree), 3), degree)
    except ValueError as e:
        raise FormatError(f"{name}: invalid scene contents: {e}") from None


def write_scene(scene: GaussianScene, path) -> None:
    Path(path).write_bytes(scene_to_bytes(scene))


def read_scene(path) -> GaussianScene:
    return scene_from_bytes(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------------------
# Splat PLY (layout used by common Gaussian-splat viewers)
# ---------------------------------------------------------------------------
# Viewers store log standard deviations, opacity logits and a quaternion whose
# matrix maps local to world axes. Our quaternion's matrix maps world to local
# (cov = R^T diag(s) R), so the stored quaternion is its conjugate.

def _ply_names(n_rest: int) -> list:
    return (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
            + [f"f_rest_{i}" for i in range(n_rest)]
            + ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"])


def export_ply(scene: GaussianScene, path) -> None:
    n, B = scene.count, scene.sh.shape[1]
    names = _ply_names(3 * (B - 1))
    rest = scene.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, 3 * (B - 1))  # channel-major
    op = scene.opacities
    with np.errstate(divide="ignore"):
        logit = np.log(op) - np.log1p(-op)
    q = scene.rotations * np.array([1.0, -1.0, -1.0, -1.0])
    cols = np.concatenate([scene.means, np.zeros((n, 3)), scene.sh[:, 0, :], rest, logit[:, None],
                           0.5 * np.log(scene.scales), q], axis=1)
    arr = np.empty(n, dtype=[(k, "<f4") for k in names])
    for i, k in enumerate(names):
        arr[k] = cols[:, i]
    PlyData([PlyElement.describe(arr, "vertex")], byte_order="<").write(str(path))


def import_ply(path) -> GaussianScene:
    try:
        ply = PlyData.read(str(path))
        v = ply["vertex"].data
    except Exception as e:  # plyfile raises several unrelated types on bad input
        raise FormatError(f"{path}: cannot read PLY: {e}") from None
    names = v.dtype.names
    n_rest = sum(1 for k in names if k.startswith("f_rest_"))
    if n_rest % 3:
        raise FormatError(f"{path}: {n_rest} f_rest fields is not a multiple of 3")
    B = 1 + n_rest // 3
    degree = degree_from_basis(B)
    try:
        col = {k: np.asarray(v[k], dtype=np.float64) for k in _ply_names(n_rest) if k not in ("nx", "ny", "nz")}
    except ValueError as e:
        raise FormatError(f"{path}: missing splat field ({e})") from None
    n = len(v)
    sh = np.zeros((n, B, 3))
    sh[:, 0] = np.stack([col[f"f_dc_{c}"] for c in range(3)], axis=1)
    if B > 1:
        rest = np.stack([col[f"f_rest_{i}"] for i in range(n_rest)], axis=1)
        sh[:, 1:] = rest.reshape(n, 3, B - 1).transpose(0, 2, 1)
    q = np.stack([col[f"rot_{i}"] for i in range(4)], axis=1) * np.array([1.0, -1.0, -1.0, -1.0])
    means = np.stack([col["x"], col["y"], col["z"]], axis=1)
    scales = np.exp(2.0 * np.stack([col[f"scale_{i}"] for i in range(3)], axis=1))
    opac = 1.0 / (1.0 + np.exp(-col["opacity"]))
    return GaussianScene(means, q, scales, opac, sh, degree)


# ---------------------------------------------------------------------------
# Depth maps
# ---------------------------------------------------------------------------

def _check_depth(depth: np.ndarray, name) -> np.ndarray:
    if depth.ndim != 2 or depth.size == 0:
        raise FormatError(f"{name}: depth must be a non-empty 2D map")
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise FormatError(f"{name}: depth contains non-positive or non-finite values")
    return depth


def write_pfm(path, depth) -> None:
    depth = np.asarray(depth, dtype="<f4")
    H, W = depth.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{W} {H}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(depth[::-1]).tobytes())  # PFM rows run bottom-up


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    try:
        head, rest = data.split(b"\n", 1)
        dims, rest = rest.split(b"\n", 1)
        scale_line, body = rest.split(b"\n", 1)
        W, H = (int(x) for x in dims.split())
        scale = float(scale_line)
    except ValueError:
        raise FormatError(f"{path}: malformed PFM header") from None
    if head.strip() == b"PF":
        raise FormatError(f"{path}: colour PFM is not a depth map")
    if head.strip() != b"Pf":
        raise FormatError(f"{path}: not a PFM file")
    dtype = "<f4" if scale < 0 else ">f4"
    if len(body) != 4 * W * H:
        raise FormatError(f"{path}: expected {4 * W * H} bytes of pixel data, found {len(body)}")
    depth = np.frombuffer(body, dtype=dtype).reshape(H, W)[::-1].astype(np.float64)
    return _check_depth(depth, path)


def _sidecar(path) -> Path:
    return Path(str(path) + ".json")


def write_png16_depth(path, depth, scale: float | None = None) -> float:
    """Quantize to 16-bit with ``depth = value * scale``; the scale goes to ``<path>.json``."""
    depth = np.asarray(depth, dtype=np.float64)
    _check_depth(depth, path)
    if scale is None:
        scale = float(depth.max()) / 65535.0
    q = np.rint(depth / scale)
    if q.max() > 65535 or q.min() < 1:
        raise FormatError("depth range does not fit 16 bits at this scale")
    Image.fromarray(q.astype(np.uint16)).save(path)
    _sidecar(path).write_text(json.dumps({"scale": scale}))
    return scale


def read_png16_depth(path) -> np.ndarray:
    side = _sidecar(path)
    if not side.exists():
        raise FormatError(f"{path}: missing scale sidecar {side.name}")
    try:
        scale = float(json.loads(side.read_text())["scale"])
    except (ValueError, KeyError, TypeError):
        raise FormatError(f"{side}: sidecar must be JSON with a numeric 'scale'") from None
    try:
        with Image.open(path) as im:
            im.load()
            raw = np.asarray(im)
    except OSError as e:
        raise FormatError(f"{path}: cannot decode PNG: {e}") from None
    if raw.ndim != 2 or raw.dtype.itemsize < 2:
        raise FormatError(f"{path}: expected a single-channel 16-bit PNG")
    return _check_depth(raw.astype(np.float64) * scale, path)


def read_depth(path) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix == ".pfm":
        return read_pfm(path)
    if suffix == ".png":
        return read_png16_depth(path)
    raise FormatError(f"{path}: unknown depth format (use .pfm or 16-bit .png)")


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """8-bit image as float RGB in [0, 1], ``(H, W, 3)``."""
    try:
        with Image.open(path) as im:
            im.load()
            rgb = np.asarray(im.convert("RGB"))
    except OSError as e:
        raise FormatError(f"{path}: cannot decode image: {e}") from None
    return rgb.astype(np.float64) / 255.0


def write_image(path, img) -> None:
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.rint(img * 255.0).astype(np.uint8)).save(path)


# ---------------------------------------------------------------------------
# Cameras, trajectories and target lists
# ---------------------------------------------------------------------------

def write_camera(path, cam: CameraIntrinsics) -> None:
    Path(path).write_text(json.dumps({"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                                      "width": cam.width, "height": cam.height}, indent=1))


def read_camera(path) -> CameraIntrinsics:
    try:
        d = json.loads(Path(path).read_text())
        return CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                                int(d["width"]), int(d["height"]))
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad camera file: {e}") from None


ORTHO_WARN = 1e-4
ORTHO_ERROR = 1e-2


def orthonormalize(R: np.ndarray, where: str = "") -> np.ndarray:
    """Nearest rotation via SVD; warn past 1e-4 deviation, fail past 1e-2."""
    dev = float(np.max(np.abs(R.T @ R - np.eye(3))))
    if dev > ORTHO_ERROR or np.linalg.det(R) <= 0:
        raise FormatError(f"{where}rotation block is not a rotation (deviation {dev:.3g})")
    if dev > ORTHO_WARN:
        warnings.warn(f"{where}rotation deviates from orthonormal by {dev:.3g}; re-orthonormalized",
                      stacklevel=3)
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


def parse_trajectory_line(line: str, width: int, height: int, where: str = ""):
    tok = line.split()
    if len(tok) != 19:
        raise FormatError(f"{where}expected 19 values (id, 4 intrinsics, 2 reserved, 12 pose), "
                          f"got {len(tok)}")
    try:
        vals = np.array([float(t) for t in tok[1:]])
    except ValueError as e:
        raise FormatError(f"{where}{e}") from None
    fx_n, fy_n, cx_n, cy_n = (float(v) for v in vals[:4])
    if not all(0 < v <= 10 for v in (fx_n, fy_n, cx_n, cy_n)):
        raise FormatError(f"{where}normalized intrinsics must lie in (0, 10]")
    # normalized coordinates put pixel i's centre at (i + 0.5) / size
    cam = CameraIntrinsics(fx_n * width, fy_n * height, cx_n * width - 0.5, cy_n * height - 0.5,
                           width, height)
    M = vals[6:].reshape(3, 4)
    R = orthonormalize(M[:, :3], where)
    return tok[0], cam, Pose.from_matrix34(np.concatenate([R, M[:, 3:]], axis=1))


def load_trajectory(path, width: int = 384, height: int = 256) -> list:
    """``[(frame_id, CameraIntrinsics, Pose)]`` in file order.

    A first line that is not numeric (a source URL, in published camera
    files) is skipped; blank lines are ignored.
    """
    frames = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if lineno == 1 and len(s.split()) == 1 and not _is_number(s):
                continue
            frames.append(parse_trajectory_line(s, width, height, f"{path}:{lineno}: "))
    return frames


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def write_targets(path, entries) -> None:
    """``entries``: ``[(image_path, Pose)]``, written as path plus 12 camera-from-world values."""
    with open(path, "w") as fh:
        for img, pose in entries:
            vals = " ".join(repr(float(v)) for v in pose.matrix34.ravel())
            fh.write(f"{img} {vals}\n")


def load_targets(path) -> list:
    """Inverse of :func:`write_targets`; relative image paths resolve against the list's folder."""
    base = Path(path).parent
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            tok = s.split()
            if len(tok) != 13:
                raise FormatError(f"{path}:{lineno}: expected an image path and 12 pose values, "
                                  f"got {len(tok)} fields")
            try:
                M = np.array([float(t) for t in tok[1:]]).reshape(3, 4)
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
            R = orthonormalize(M[:, :3], f"{path}:{lineno}: ")
            img = Path(tok[0])
            out.append((img if img.is_absolute() else base / img,
                        Pose.from_matrix34(np.concatenate([R, M[:, 3:]], axis=1))))
    return out


# ---------------------------------------------------------------------------
# Fitted layered parameters
# ---------------------------------------------------------------------------

def save_params(path, params) -> None:
    np.savez(path, padding=np.int64(params.padding), **params.arrays())


def load_params(path):
    try:
        with np.load(path) as z:
            arrays = {k: z[k].astype(np.float64) for k in RAW_CLASSES}
            padding = int(z["padding"])
    except (OSError, KeyError, ValueError) as e:
        raise FormatError(f"{path}: not a layered parameter file: {e}") from None
    return RawLayeredParams(**arrays, padding=padding)
