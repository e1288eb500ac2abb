"""Reference-based quality indices for fused hyperspectral cubes.

All four metrics take float32 (H, W, C) cubes and compute internally in
float64. PSNR is band-averaged; SAM is the mean per-pixel spectral angle in
degrees; ERGAS is the ratio-scaled band-normalized RMSE aggregate; SSIM is
the mean over bands of the Gaussian-window structural similarity computed
on the valid (unpadded) region.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class UndefinedMetricError(ValueError):
    """The metric has no defined value for these inputs."""


def _check_pair(x: np.ndarray, gt: np.ndarray):
    x = np.asarray(x)
    gt = np.asarray(gt)
    if x.ndim != 3 or gt.ndim != 3:
        raise ValueError("inputs must be (H, W, C) cubes")
    if x.shape != gt.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {gt.shape}")
    return x.astype(np.float64), gt.astype(np.float64)


def per_band_psnr(x: np.ndarray, gt: np.ndarray, peak: float = 1.0) -> list[float]:
    x, gt = _check_pair(x, gt)
    out = []
    for b in range(x.shape[2]):
        mse = float(np.mean((x[:, :, b] - gt[:, :, b]) ** 2))
        out.append(math.inf if mse == 0.0 else 10.0 * math.log10(peak * peak / mse))
    return out


def psnr(x: np.ndarray, gt: np.ndarray, peak: float = 1.0) -> float:
    """Band-averaged PSNR in dB.

    Exact bands contribute +inf individually; the aggregate is +inf only
    when every band is exact, otherwise it is the mean of the finite band
    values (so one lucky band cannot swamp the average).
    """
    vals = per_band_psnr(x, gt, peak)
    finite = [v for v in vals if math.isfinite(v)]
    if not finite:
        return math.inf
    return float(np.mean(finite))


def sam(x: np.ndarray, gt: np.ndarray) -> float:
    """Mean per-pixel spectral angle in degrees.

    Pixels where either spectrum has zero norm get angle 0 but still count
    in the mean.
    """
    x, gt = _check_pair(x, gt)
    xs = x.reshape(-1, x.shape[2])
    gs = gt.reshape(-1, gt.shape[2])
    nx = np.linalg.norm(xs, axis=1)
    ng = np.linalg.norm(gs, axis=1)
    ok = (nx > 0) & (ng > 0)
    angles = np.zeros(len(xs))
    cosine = np.sum(xs[ok] * gs[ok], axis=1) / (nx[ok] * ng[ok])
    angles[ok] = np.degrees(np.arccos(np.clip(cosine, -1.0, 1.0)))
    return float(angles.mean())


def ergas(x: np.ndarray, gt: np.ndarray, ratio: float) -> float:
    """Relative dimensionless global error: (100/r) * sqrt(mean_b MSE_b / mu_b^2).

    Bands whose reference mean is exactly zero are excluded (and logged);
    if every band is excluded the metric is undefined.
    """
    x, gt = _check_pair(x, gt)
    if ratio <= 0:
        raise ValueError(f"ratio must be > 0, got {ratio}")
    mse = np.mean((x - gt) ** 2, axis=(0, 1))
    mu = gt.mean(axis=(0, 1))
    keep = mu != 0.0
    if not keep.any():
        raise UndefinedMetricError("every reference band has zero mean")
    dropped = np.flatnonzero(~keep)
    if dropped.size:
        log.warning("ergas: excluding zero-mean reference bands %s", dropped.tolist())
    return float((100.0 / ratio) * np.sqrt(np.mean(mse[keep] / mu[keep] ** 2)))


def _ssim_window() -> np.ndarray:
    half = (SSIM_WINDOW - 1) // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    w = np.exp(-(xs * xs) / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
    return w / w.sum()


def _valid_filter(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable valid-region correlation with a normalized 1-d window."""
    n = len(taps)
    h, w = img.shape
    out = np.zeros((h - n + 1, w))
    for i, t in enumerate(taps):
        out += t * img[i : i + h - n + 1]
    final = np.zeros((h - n + 1, w - n + 1))
    for j, t in enumerate(taps):
        final += t * out[:, j : j + w - n + 1]
    return final


def ssim(x: np.ndarray, gt: np.ndarray, peak: float = 1.0) -> float:
    """Mean structural similarity, averaged over bands.

    11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, computed only
    where the window fits entirely inside the image.
    """
    x, gt = _check_pair(x, gt)
    h, w, bands = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {h}x{w} smaller than the {SSIM_WINDOW}-pixel window")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    taps = _ssim_window()
    vals = []
    for b in range(bands):
        xb, gb = x[:, :, b], gt[:, :, b]
        mx = _valid_filter(xb, taps)
        mg = _valid_filter(gb, taps)
        xx = _valid_filter(xb * xb, taps) - mx * mx
        gg = _valid_filter(gb * gb, taps) - mg * mg
        xg = _valid_filter(xb * gb, taps) - mx * mg
        num = (2.0 * mx * mg + c1) * (2.0 * xg + c2)
        den = (mx * mx + mg * mg + c1) * (xx + gg + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


@dataclass
class QualityReport:
    psnr: float
    sam: float
    ergas: float
    ssim: float
    per_band_psnr: list[float]


def report(x: np.ndarray, gt: np.ndarray, ratio: float) -> QualityReport:
    return QualityReport(
        psnr=psnr(x, gt),
        sam=sam(x, gt),
        ergas=ergas(x, gt, ratio),
        ssim=ssim(x, gt),
        per_band_psnr=per_band_psnr(x, gt),
    )


def _encode(v: float):
    if math.isfinite(v):
        return v
    return "inf" if v > 0 else "-inf"


def _decode(v) -> float:
    if isinstance(v, str):
        if v == "inf":
            return math.inf
        if v == "-inf":
            return -math.inf
        raise ValueError(f"bad metric value {v!r}")
    return float(v)


def report_to_json(rep: QualityReport) -> str:
    d = asdict(rep)
    obj = {k: _encode(v) for k, v in d.items() if k != "per_band_psnr"}
    obj["per_band_psnr"] = [_encode(v) for v in d["per_band_psnr"]]
    return json.dumps(obj, indent=2) + "\n"


def report_from_json(text: str) -> QualityReport:
    obj = json.loads(text)
    return QualityReport(
        psnr=_decode(obj["psnr"]),
        sam=_decode(obj["sam"]),
        ergas=_decode(obj["ergas"]),
        ssim=_decode(obj["ssim"]),
        per_band_psnr=[_decode(v) for v in obj["per_band_psnr"]],
    )
