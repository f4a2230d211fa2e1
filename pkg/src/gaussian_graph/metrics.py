"""Image quality and efficiency metrics."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(1 / MSE) over all channels, capped at 99 dB for identical images."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(x, g):
    pad = (len(g) - 1) // 2
    y = correlate1d(correlate1d(x, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")
    return y[pad:-pad, pad:-pad]


def ssim(a, b, data_range: float = 1.0) -> float:
    """Single-scale SSIM on luma, Gaussian window, mean over valid positions."""
    a, b = _check_pair(a, b)
    x, y = to_gray(a), to_gray(b)
    if min(x.shape) < SSIM_WIN:
        raise ValueError(f"image smaller than the {SSIM_WIN}x{SSIM_WIN} SSIM window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx = _filter_valid(x, g)
    my = _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class EvalReport:
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    lifted_count: int = 0
    gaussian_count: int = 0
    render_ms: float = float("nan")
    stage_ms: dict = field(default_factory=dict)
    lpips: str = "n/a"

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    @property
    def fps(self) -> float:
        return 1000.0 / self.render_ms if self.render_ms > 0 else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(mean_psnr=self.mean_psnr, mean_ssim=self.mean_ssim, fps=self.fps)
        return d


class StageTimer:
    """Monotonic wall-clock timings keyed by stage name."""

    def __init__(self):
        self.ms = {}

    def __call__(self, name):
        return _Stage(self, name)


class _Stage:
    def __init__(self, timer, name):
        self.timer, self.name = timer, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.timer.ms[self.name] = self.timer.ms.get(self.name, 0.0) + 1000 * (time.perf_counter() - self.t0)


def time_frames(fn, frames: int = 3, warmup: int = 1) -> float:
    """Mean milliseconds per call of `fn`, warmup calls excluded."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(frames):
        t0 = time.perf_counter()
        fn()
        times.append(1000 * (time.perf_counter() - t0))
    return float(np.mean(times))


def count_and_time(lifted_count: int, pooled_count: int, stage_ms=None, render_ms=float("nan"),
                   psnrs=(), ssims=()) -> EvalReport:
    return EvalReport(list(psnrs), list(ssims), int(lifted_count), int(pooled_count), float(render_ms),
                      dict(stage_ms or {}))


def union_count(views: int, height: int = 256, width: int = 256, per_pixel: int = 1) -> int:
    """Gaussians kept by a plain union of pixel-aligned views."""
    return views * height * width * per_pixel
