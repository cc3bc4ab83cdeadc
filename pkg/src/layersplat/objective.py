"""Photometric loss (L1 + SSIM) with exact gradient, and PSNR/SSIM evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.85
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_k1: float = 0.01
    ssim_k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise MetricError("alpha must lie in [0, 1]")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise MetricError("SSIM window must be a positive odd integer")

    @property
    def c1(self) -> float:
        return (self.ssim_k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.ssim_k2 * self.dynamic_range) ** 2


@dataclass(frozen=True)
class MetricsReport:
    psnr: float
    ssim: float
    crop_fraction: float
    region: tuple  # (height, width) of the evaluated crop

    def to_dict(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "crop_fraction": self.crop_fraction,
                "region": list(self.region)}


def _as_image(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[..., None] if x.ndim == 2 else x


def _check_pair(pred, target):
    pred, target = _as_image(pred), _as_image(target)
    if pred.shape != target.shape:
        raise MetricError(f"image shapes differ: {pred.shape} vs {target.shape}")
    return pred, target


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x**2) / (2 * sigma**2))
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the two spatial axes of ``(H, W, C)``."""
    k = w.size
    a = sliding_window_view(img, k, axis=0) @ w
    return sliding_window_view(a, k, axis=1) @ w


def _filter_valid_adjoint(grad: np.ndarray, w: np.ndarray) -> np.ndarray:
    k = w.size
    pad = k - 1
    g = np.pad(grad, ((pad, pad), (pad, pad), (0, 0)))
    wf = w[::-1]
    a = sliding_window_view(g, k, axis=0) @ wf
    return sliding_window_view(a, k, axis=1) @ wf


def _ssim_terms(x, y, cfg: LossConfig):
    if x.shape[0] < cfg.ssim_window or x.shape[1] < cfg.ssim_window:
        raise MetricError(f"image {x.shape[:2]} smaller than the SSIM window {cfg.ssim_window}")
    w = gaussian_window(cfg.ssim_window, cfg.ssim_sigma)
    ux, uy = _filter_valid(x, w), _filter_valid(y, w)
    uxx, uyy, uxy = _filter_valid(x * x, w), _filter_valid(y * y, w), _filter_valid(x * y, w)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    cxy = uxy - ux * uy
    a1 = 2 * ux * uy + cfg.c1
    a2 = 2 * cxy + cfg.c2
    b1 = ux * ux + uy * uy + cfg.c1
    b2 = vx + vy + cfg.c2
    return w, ux, uy, a1, a2, b1, b2


def ssim(pred, target, cfg: LossConfig | None = None) -> float:
    """Mean local SSIM over all valid window positions and channels."""
    cfg = cfg or LossConfig()
    x, y = _check_pair(pred, target)
    _, _, _, a1, a2, b1, b2 = _ssim_terms(x, y, cfg)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_with_grad(pred, target, cfg: LossConfig | None = None):
    """SSIM and its gradient w.r.t. ``pred``."""
    cfg = cfg or LossConfig()
    x, y = _check_pair(pred, target)
    w, ux, uy, a1, a2, b1, b2 = _ssim_terms(x, y, cfg)
    if np.array_equal(x, y):
        # SSIM peaks at x == y; return the exact zero rather than round-off
        return 1.0, np.zeros_like(x)
    smap = a1 * a2 / (b1 * b2)
    g = 1.0 / smap.size
    d = b1 * b2
    d_ux = (2 * uy * a2 - 2 * uy * a1) / d - smap * 2 * ux / b1 + smap * 2 * ux / b2
    d_uxx = -smap / b2
    d_uxy = 2 * a1 / d
    grad = (_filter_valid_adjoint(g * d_ux, w) + 2 * x * _filter_valid_adjoint(g * d_uxx, w)
            + y * _filter_valid_adjoint(g * d_uxy, w))
    return float(np.mean(smap)), grad


def photometric_loss(pred, target, cfg: LossConfig | None = None):
    """``(1 - a) * mean|pred - target| + a * (1 - SSIM) / 2`` and its gradient w.r.t. ``pred``."""
    cfg = cfg or LossConfig()
    x, y = _check_pair(pred, target)
    diff = x - y
    l1 = float(np.mean(np.abs(diff)))
    grad = (1 - cfg.alpha) * np.sign(diff) / diff.size
    loss = (1 - cfg.alpha) * l1
    if cfg.alpha > 0:
        s, gs = ssim_with_grad(x, y, cfg)
        loss += cfg.alpha * (1 - s) / 2
        grad = grad - cfg.alpha / 2 * gs
    return loss, grad.reshape(np.shape(pred))


def psnr(pred, target) -> float:
    x, y = _check_pair(pred, target)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def crop_border(img, crop_fraction: float) -> np.ndarray:
    img = np.asarray(img)
    h, w = img.shape[:2]
    ch, cw = int(math.floor(crop_fraction * h)), int(math.floor(crop_fraction * w))
    return img[ch:h - ch, cw:w - cw]


def eval_pair(pred, gt, crop_fraction: float = 0.05, cfg: LossConfig | None = None) -> MetricsReport:
    cfg = cfg or LossConfig()
    if not 0 <= crop_fraction < 0.5:
        raise MetricError("crop_fraction must be in [0, 0.5)")
    pred, gt = _check_pair(pred, gt)
    p, g = crop_border(pred, crop_fraction), crop_border(gt, crop_fraction)
    if p.shape[0] < cfg.ssim_window or p.shape[1] < cfg.ssim_window:
        raise MetricError(f"crop {p.shape[:2]} leaves fewer pixels than the SSIM window")
    return MetricsReport(psnr(p, g), ssim(p, g, cfg), crop_fraction, p.shape[:2])
