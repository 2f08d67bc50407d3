"""Image quality (PSNR, MS-SSIM), bit accounting and the Bjontegaard delta rate."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
BD_VARIANT = "cubic-polyfit log10(rate) vs quality, closed-form integral"


class CurveError(ValueError):
    pass


def _as_float(img) -> np.ndarray:
    return np.asarray(img, dtype=np.float64)


def psnr(reference, test, peak: float = 255.0) -> float:
    """PSNR in dB over all pixels and channels; ``inf`` for identical inputs."""
    a, b = _as_float(reference), _as_float(test)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def luma(img) -> np.ndarray:
    """BT.601 luma of an HxWx3 RGB array (2-D input is returned as float)."""
    a = _as_float(img)
    if a.ndim == 2:
        return a
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected HxW or HxWx3 image, got {a.shape}")
    return a @ np.array([0.299, 0.587, 0.114])


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    win = np.outer(g, g)
    return win / win.sum()


def _ssim_terms(x, y, win, c1, c2):
    def filt(a):
        return convolve2d(a, win, mode="valid")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    lum = (2 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def msssim_scales(height: int, width: int, window: int = 11, max_scales: int = 5) -> int:
    n = 1
    while n < max_scales and min(height, width) // 2**n >= window:
        n += 1
    return n


def ms_ssim(reference, test, data_range: float = 255.0) -> float:
    """Five-scale MS-SSIM on BT.601 luma (fewer, renormalized scales for small images)."""
    x, y = luma(reference), luma(test)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < 11:
        raise ValueError(f"MS-SSIM needs at least 11x11 pixels, got {x.shape}")
    if np.array_equal(x, y):
        return 1.0
    levels = msssim_scales(*x.shape)
    weights = np.array(MSSSIM_WEIGHTS[:levels])
    weights /= weights.sum()
    win = gaussian_window()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    value = 1.0
    for s in range(levels):
        ssim, cs = _ssim_terms(x, y, win, c1, c2)
        term = ssim if s == levels - 1 else cs
        # negative structure correlation is clipped so the fractional power stays real
        value *= max(term, 0.0) ** weights[s]
        if s < levels - 1:
            h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
            x = x[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
            y = y[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
    return float(value)


def total_bpp(codec_bits: int, weight_bits: int, pixels: int) -> float:
    if pixels <= 0:
        raise ValueError("pixel count must be positive")
    return (codec_bits + weight_bits) / pixels


# ----------------------------------------------------------------- R-D curves


@dataclass
class RdPoint:
    bpp: float
    psnr: float
    msssim: float = float("nan")
    label: str = ""

    def quality(self, metric: str) -> float:
        return getattr(self, metric)


@dataclass
class RdCurve:
    points: list[RdPoint] = field(default_factory=list)
    codec: str = ""
    image: str = ""
    parameterization: str = ""

    def sorted(self) -> "RdCurve":
        return RdCurve(sorted(self.points, key=lambda p: p.bpp), self.codec, self.image, self.parameterization)

    def arrays(self, metric: str = "psnr") -> tuple[np.ndarray, np.ndarray]:
        pts = [p for p in self.sorted().points if math.isfinite(p.quality(metric))]
        dropped = len(self.points) - len(pts)
        if dropped:
            warnings.warn(f"{dropped} non-finite {metric} point(s) excluded from the curve", stacklevel=2)
        return np.array([p.bpp for p in pts]), np.array([p.quality(metric) for p in pts])

    def to_json(self) -> dict:
        return {
            "codec": self.codec,
            "image": self.image,
            "parameterization": self.parameterization,
            "points": [
                {"label": p.label, "bpp": p.bpp, "psnr": _finite_or_none(p.psnr), "msssim": _finite_or_none(p.msssim)}
                for p in self.points
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "RdCurve":
        pts = [
            RdPoint(
                p["bpp"],
                math.inf if p.get("psnr") is None else p["psnr"],
                math.nan if p.get("msssim") is None else p["msssim"],
                str(p.get("label", "")),
            )
            for p in doc["points"]
        ]
        return cls(pts, doc.get("codec", ""), doc.get("image", ""), doc.get("parameterization", ""))


def _finite_or_none(v: float):
    return v if math.isfinite(v) else None


def _fit(rate: np.ndarray, quality: np.ndarray, which: str) -> np.ndarray:
    if len(rate) < 4:
        raise CurveError(f"{which} curve has {len(rate)} usable points; BD-rate needs at least 4")
    if np.any(rate <= 0):
        raise CurveError(f"{which} curve has non-positive rates")
    if len(np.unique(quality)) != len(quality):
        raise CurveError(f"{which} curve has duplicate quality values")
    return np.polyfit(quality, np.log10(rate), 3)


def bd_rate_arrays(anchor_rate, anchor_quality, test_rate, test_quality) -> float:
    ra, qa = np.asarray(anchor_rate, float), np.asarray(anchor_quality, float)
    rt, qt = np.asarray(test_rate, float), np.asarray(test_quality, float)
    pa = _fit(ra, qa, "anchor")
    pt = _fit(rt, qt, "test")
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if not hi > lo:
        raise CurveError(f"quality ranges do not overlap ([{qa.min()}, {qa.max()}] vs [{qt.min()}, {qt.max()}])")
    ia, it = np.polyint(pa), np.polyint(pt)
    area_a = np.polyval(ia, hi) - np.polyval(ia, lo)
    area_t = np.polyval(it, hi) - np.polyval(it, lo)
    return float((10 ** ((area_t - area_a) / (hi - lo)) - 1.0) * 100.0)


def bd_rate(anchor: RdCurve, test: RdCurve, metric: str = "psnr") -> float:
    """Average rate difference of ``test`` vs ``anchor`` in percent (negative = fewer bits)."""
    return bd_rate_arrays(*anchor.arrays(metric), *test.arrays(metric))
