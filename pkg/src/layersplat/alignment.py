"""Scale alignment between predicted metric depth and a reference reconstruction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class RansacConfig:
    sample_size: int = 5
    iterations: int = 1000
    threshold: float = 0.1  # on |log(scale * d_pred / d_ref)|
    seed: int = 0

    def __post_init__(self):
        if self.sample_size < 1:
            raise AlignmentError("sample_size must be >= 1")
        if self.iterations < 1:
            raise AlignmentError("iterations must be >= 1")
        if not self.threshold > 0:
            raise AlignmentError("threshold must be positive")


@dataclass(frozen=True)
class RansacResult:
    scale: float
    inliers: np.ndarray  # sorted pair indices
    best_iteration: int


def _log_ratios(d_pred, d_ref) -> np.ndarray:
    d_pred = np.asarray(d_pred, dtype=np.float64).ravel()
    d_ref = np.asarray(d_ref, dtype=np.float64).ravel()
    if d_pred.shape != d_ref.shape:
        raise AlignmentError(f"{d_pred.size} predicted depths but {d_ref.size} reference depths")
    if d_pred.size == 0:
        raise AlignmentError("need at least one depth pair")
    if not (np.all(np.isfinite(d_pred)) and np.all(np.isfinite(d_ref))):
        raise AlignmentError("depths must be finite")
    if np.any(d_pred <= 0) or np.any(d_ref <= 0):
        raise AlignmentError("depths must be positive")
    return np.log(d_ref) - np.log(d_pred)


def scale_lsq(d_pred, d_ref) -> float:
    """Scale ``s`` minimizing the squared log error of ``s * d_pred`` against ``d_ref``.

    This is the geometric mean of the ratios ``d_ref / d_pred``.
    """
    return float(np.exp(np.mean(_log_ratios(d_pred, d_ref))))


def scale_ransac(d_pred, d_ref, cfg: RansacConfig | None = None) -> RansacResult:
    """Robust scale: best consensus over random minimal samples, refit on its inliers."""
    cfg = cfg or RansacConfig()
    lr = _log_ratios(d_pred, d_ref)
    n = lr.size
    if n < cfg.sample_size:
        raise AlignmentError(f"{n} pairs is fewer than the sample size {cfg.sample_size}")
    rng = np.random.default_rng(cfg.seed)
    best, best_count, best_iter = None, -1, -1
    for it in range(cfg.iterations):
        sample = rng.choice(n, size=cfg.sample_size, replace=False)
        log_s = np.mean(lr[sample])
        inl = np.abs(log_s - lr) < cfg.threshold
        count = int(inl.sum())
        if count > best_count:  # strict: earlier iterations win ties
            best, best_count, best_iter = inl, count, it
    idx = np.flatnonzero(best)
    return RansacResult(float(np.exp(np.mean(lr[idx]))), idx, best_iter)


def load_pairs(path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``d_pred d_ref`` per line; blank lines and ``#`` comments are skipped."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise AlignmentError(f"{path}:{lineno}: expected 2 values, got {len(parts)}")
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except ValueError as e:
                raise AlignmentError(f"{path}:{lineno}: {e}") from None
    if not rows:
        raise AlignmentError(f"{path}: no depth pairs")
    a = np.array(rows)
    return a[:, 0], a[:, 1]


def pairs_from_depth_map(depth, points) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``depth`` at sparse reference points ``(u, v, d_ref)`` (pixel coordinates).

    Points are looked up at the nearest pixel; those falling outside the map are dropped.
    """
    depth = np.asarray(depth, dtype=np.float64)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.shape[1] != 3:
        raise AlignmentError("reference points must be rows of (u, v, d_ref)")
    u = np.rint(pts[:, 0]).astype(np.int64)
    v = np.rint(pts[:, 1]).astype(np.int64)
    ok = (u >= 0) & (u < depth.shape[1]) & (v >= 0) & (v < depth.shape[0])
    return depth[v[ok], u[ok]], pts[ok, 2]
