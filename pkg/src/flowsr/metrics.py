"""PSNR, SSIM and RMSE/MAE on the 0-255 scale, plus report aggregation.

All metrics take [C, H, W] (or [H, W]) arrays, clamp both inputs to [0, 1]
and treat the peak value as 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.signal import convolve2d

from flowsr.errors import ShapeError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _prepare(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"metric inputs differ in shape: {a.shape} vs {b.shape}")
    return np.clip(a, 0.0, 1.0), np.clip(b, 0.0, 1.0)


def psnr(a, b, peak: float = 1.0, cap: float = PSNR_CAP) -> float:
    """10 log10(peak^2 / MSE); identical images return ``cap``."""
    a, b = _prepare(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(peak * peak / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_channel(a: np.ndarray, b: np.ndarray, window: np.ndarray, peak: float) -> float:
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2

    def filt(img):
        return convolve2d(img, window, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    aa = filt(a * a) - mu_a * mu_a
    bb = filt(b * b) - mu_b * mu_b
    ab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (aa + bb + c2)
    return float(np.mean(num / den))


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM over 11x11 Gaussian (sigma 1.5) windows, averaged over channels."""
    a, b = _prepare(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.shape[-1] < SSIM_WINDOW or a.shape[-2] < SSIM_WINDOW:
        raise ShapeError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[-2:]}")
    window = gaussian_window()
    return float(np.mean([_ssim_channel(x, y, window, peak) for x, y in zip(a, b)]))


def rmse_mae_255(a, b) -> Tuple[float, float]:
    a, b = _prepare(a, b)
    d = a - b
    return 255.0 * math.sqrt(float(np.mean(d * d))), 255.0 * float(np.mean(np.abs(d)))


@dataclass
class SampleMetrics:
    id: str
    psnr: float
    ssim: float
    rmse_255: float
    mae_255: float
    psnr_capped: bool = False


def measure(sample_id: str, pred, target) -> SampleMetrics:
    p = psnr(pred, target)
    rmse, mae = rmse_mae_255(pred, target)
    return SampleMetrics(sample_id, p, ssim(pred, target), rmse, mae, psnr_capped=rmse == 0.0)


COLUMNS = ("PSNR", "SSIM", "RMSE", "MAE")


@dataclass
class MetricReport:
    label: str = ""
    samples: List[SampleMetrics] = field(default_factory=list)

    def add(self, m: SampleMetrics) -> None:
        self.samples.append(m)

    def means(self) -> Tuple[float, float, float, float]:
        if not self.samples:
            return (float("nan"),) * 4
        return (
            float(np.mean([s.psnr for s in self.samples])),
            float(np.mean([s.ssim for s in self.samples])),
            float(np.mean([s.rmse_255 for s in self.samples])),
            float(np.mean([s.mae_255 for s in self.samples])),
        )

    @property
    def psnr(self) -> float:
        return self.means()[0]

    @property
    def ssim(self) -> float:
        return self.means()[1]

    @property
    def rmse_255(self) -> float:
        return self.means()[2]

    @property
    def mae_255(self) -> float:
        return self.means()[3]

    def rows(self, per_sample: bool = True):
        out = []
        if per_sample:
            for s in self.samples:
                out.append((s.id, s.psnr, s.ssim, s.rmse_255, s.mae_255))
        out.append(("mean",) + self.means())
        return out

    def to_table(self, per_sample: bool = True) -> str:
        from flowsr.report import format_table

        return format_table(("sample",) + COLUMNS, self.rows(per_sample), title=self.label)

    def to_csv(self, per_sample: bool = True) -> str:
        from flowsr.report import format_csv

        return format_csv(("sample",) + COLUMNS, self.rows(per_sample))
