"""Hyperspectral cube utilities.

Cubes are float32 numpy arrays of shape (H, W, C) with values nominally in
[0, 1]. This module covers cube file I/O, the degradation pipeline that
manufactures fusion inputs from a known ground truth (spatial blur +
decimation for the low-res hyperspectral image, spectral projection for the
high-res multispectral image), bicubic upsampling, training patch
extraction, synthetic scene generation, and tiled inference assembly.

HSC file layout (little-endian): 8-byte magic ``HSCUBE1\\n``, u32 height,
u32 width, u32 bands, u32 dtype code (1 = float32), then H*W*C float32
values stored band-sequential, row-major within each band.
"""

from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import new_rng

HSC_MAGIC = b"HSCUBE1\n"
_HSC_HEADER = struct.Struct("<4I")
_MAX_ELEMS = 2**31  # extent sanity bound


class CubeFileError(ValueError):
    """Base class for cube file parse/write failures."""


class BadMagicError(CubeFileError):
    pass


class TruncatedCubeError(CubeFileError):
    pass


class ExtentError(CubeFileError):
    pass


def validate_cube(cube: np.ndarray, name: str = "cube") -> np.ndarray:
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ValueError(f"{name} must be (H, W, C), got shape {cube.shape}")
    if min(cube.shape) < 1:
        raise ValueError(f"{name} has an empty extent: {cube.shape}")
    if not np.all(np.isfinite(cube)):
        raise ValueError(f"{name} contains non-finite values")
    return cube


def atomic_write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_cube(path, cube: np.ndarray) -> None:
    """Write an (H, W, C) cube as an HSC file (atomically: temp + rename)."""
    cube = validate_cube(cube)
    h, w, c = cube.shape
    header = HSC_MAGIC + _HSC_HEADER.pack(h, w, c, 1)
    payload = np.ascontiguousarray(cube.transpose(2, 0, 1), dtype="<f4").tobytes()
    atomic_write_bytes(path, header + payload)


def read_cube(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:8] != HSC_MAGIC:
        raise BadMagicError(f"{path}: not an HSC cube (bad magic)")
    if len(data) < 8 + _HSC_HEADER.size:
        raise TruncatedCubeError(f"{path}: truncated header")
    h, w, c, dtype_code = _HSC_HEADER.unpack_from(data, 8)
    if dtype_code != 1:
        raise CubeFileError(f"{path}: unsupported dtype code {dtype_code}")
    if min(h, w, c) < 1 or h * w * c > _MAX_ELEMS:
        raise ExtentError(f"{path}: bad extents {h}x{w}x{c}")
    need = 8 + _HSC_HEADER.size + 4 * h * w * c
    if len(data) < need:
        raise TruncatedCubeError(f"{path}: payload is {len(data) - 24} bytes, need {need - 24}")
    if len(data) > need:
        raise CubeFileError(f"{path}: {len(data) - need} trailing bytes")
    flat = np.frombuffer(data, dtype="<f4", offset=8 + _HSC_HEADER.size)
    return np.ascontiguousarray(flat.reshape(c, h, w).transpose(1, 2, 0), dtype=np.float32)


def write_pgm(path, img: np.ndarray) -> None:
    """8-bit binary PGM (P5) grayscale dump."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"PGM image must be 2-d, got shape {img.shape}")
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    atomic_write_bytes(path, header + img.tobytes())


# ---------------------------------------------------------------------------
# degradation operators


@dataclass
class BlurKernel:
    """Separable Gaussian taps: 2*ceil(3*sigma)+1 of them, summing to 1."""

    sigma: float
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        radius = math.ceil(3.0 * self.sigma) if self.sigma > 0 else 0
        xs = np.arange(-radius, radius + 1, dtype=np.float64)
        if self.sigma > 0:
            w = np.exp(-(xs * xs) / (2.0 * self.sigma * self.sigma))
        else:
            w = np.ones(1)
        self.weights = w / w.sum()

    @property
    def taps(self) -> int:
        return len(self.weights)

    @property
    def radius(self) -> int:
        return (len(self.weights) - 1) // 2


def gaussian_blur(cube: np.ndarray, sigma: float) -> np.ndarray:
    """Per-band separable Gaussian blur, mirror padding (edge not repeated)."""
    cube = validate_cube(cube)
    kernel = BlurKernel(sigma)
    r = kernel.radius
    if r == 0:
        return cube.astype(np.float32, copy=True)
    h, w, _ = cube.shape
    if r > h - 1 or r > w - 1:
        raise ValueError(f"blur radius {r} too large for {h}x{w} image")
    wts = kernel.weights
    x = cube.astype(np.float64)
    xp = np.pad(x, ((r, r), (0, 0), (0, 0)), mode="reflect")
    acc = np.zeros_like(x)
    for i, wt in enumerate(wts):
        acc += wt * xp[i : i + h]
    xp = np.pad(acc, ((0, 0), (r, r), (0, 0)), mode="reflect")
    acc = np.zeros_like(x)
    for j, wt in enumerate(wts):
        acc += wt * xp[:, j : j + w]
    return acc.astype(np.float32)


def decimate(cube: np.ndarray, ratio: int) -> np.ndarray:
    """Keep every ratio-th sample starting at offset 0."""
    cube = validate_cube(cube)
    ratio = int(ratio)
    h, w, _ = cube.shape
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    if h % ratio or w % ratio:
        raise ValueError(f"extents {h}x{w} not divisible by ratio {ratio}")
    return np.ascontiguousarray(cube[::ratio, ::ratio], dtype=np.float32)


def normalize_srf(mat: np.ndarray) -> np.ndarray:
    """Validate and row-normalize a spectral response matrix (s x S)."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2:
        raise ValueError(f"spectral response must be 2-d, got shape {mat.shape}")
    if mat.shape[0] >= mat.shape[1]:
        raise ValueError(
            f"spectral response needs fewer output bands than input ({mat.shape})"
        )
    if np.any(mat < 0):
        raise ValueError("spectral response entries must be non-negative")
    sums = mat.sum(axis=1, keepdims=True)
    if np.any(sums <= 0):
        raise ValueError("spectral response has an all-zero row")
    return mat / sums


def load_srf(path) -> np.ndarray:
    """Plain CSV, one line per output band, S non-negative values per line."""
    mat = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return normalize_srf(mat)


def default_srf(bands: int, out_bands: int = 3) -> np.ndarray:
    """Gaussian band-passes centered at bands*(i+1)/(out_bands+1), sigma bands/6.

    For the default 3 output bands the centers sit at band fractions
    0.25, 0.5, 0.75.
    """
    lam = np.arange(bands, dtype=np.float64)
    centers = bands * (np.arange(1, out_bands + 1) / (out_bands + 1.0))
    width = bands / 6.0
    mat = np.exp(-((lam[None, :] - centers[:, None]) ** 2) / (2.0 * width * width))
    return normalize_srf(mat)


def spectral_project(cube: np.ndarray, srf: np.ndarray) -> np.ndarray:
    """Apply the spectral response per pixel: out spectrum = srf @ spectrum."""
    cube = validate_cube(cube)
    srf = np.asarray(srf, dtype=np.float64)
    if srf.ndim != 2 or srf.shape[1] != cube.shape[2]:
        raise ValueError(
            f"spectral response {srf.shape} does not match {cube.shape[2]} bands"
        )
    out = np.tensordot(cube.astype(np.float64), srf, axes=([2], [1]))
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# bicubic upsampling (Catmull-Rom, a = -0.5)


def catmull_rom(x) -> np.ndarray:
    """The a = -0.5 cubic convolution kernel, vectorized."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    near = (1.5 * ax - 2.5) * ax * ax + 1.0
    far = ((-0.5 * ax + 2.5) * ax - 4.0) * ax + 2.0
    return np.where(ax <= 1.0, near, np.where(ax < 2.0, far, 0.0))


def _axis_taps(n_in: int, ratio: int):
    """Clamped source indices (4, n_in*ratio) and tap weights for one axis.

    Destination pixel centers map back via src = (dst + 0.5)/ratio - 0.5
    (align-corners-false); taps sit at floor(src) + {-1, 0, 1, 2} and are
    clamped to the valid index range.
    """
    dst = np.arange(n_in * ratio, dtype=np.float64)
    src = (dst + 0.5) / ratio - 0.5
    i0 = np.floor(src).astype(np.int64)
    t = src - i0
    idx = np.stack([np.clip(i0 + o, 0, n_in - 1) for o in (-1, 0, 1, 2)])
    wts = np.stack([catmull_rom(t + 1.0), catmull_rom(t), catmull_rom(t - 1.0), catmull_rom(t - 2.0)])
    return idx, wts


def upsample_bicubic(cube: np.ndarray, ratio: int) -> np.ndarray:
    """Separable Catmull-Rom upsampling by an integer factor, edges clamped."""
    cube = validate_cube(cube)
    ratio = int(ratio)
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    x = cube.astype(np.float64)
    h, w, _ = cube.shape
    idx, wts = _axis_taps(h, ratio)
    rows = np.zeros((h * ratio, w, cube.shape[2]))
    for m in range(4):
        rows += wts[m][:, None, None] * x[idx[m]]
    idx, wts = _axis_taps(w, ratio)
    out = np.zeros((h * ratio, w * ratio, cube.shape[2]))
    for m in range(4):
        out += wts[m][None, :, None] * rows[:, idx[m]]
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# fusion samples


@dataclass
class FusionSample:
    """One aligned (ground truth, LR-HSI, HR-MSI, upsampled LR) group.

    gt may be None for inference-time samples where no reference exists.
    """

    gt: np.ndarray | None
    lr: np.ndarray
    msi: np.ndarray
    up: np.ndarray
    ratio: int

    def __post_init__(self):
        self.ratio = int(self.ratio)
        if self.ratio < 1:
            raise ValueError(f"ratio must be >= 1, got {self.ratio}")
        validate_cube(self.lr, "lr")
        validate_cube(self.msi, "msi")
        validate_cube(self.up, "up")
        lh, lw, s_hsi = self.lr.shape
        h, w, s_msi = self.msi.shape
        if (h, w) != (lh * self.ratio, lw * self.ratio):
            raise ValueError(
                f"msi {h}x{w} is not lr {lh}x{lw} scaled by ratio {self.ratio}"
            )
        if self.up.shape != (h, w, s_hsi):
            raise ValueError(f"up shape {self.up.shape} != ({h}, {w}, {s_hsi})")
        if s_msi >= s_hsi:
            raise ValueError(f"msi bands {s_msi} must be < hsi bands {s_hsi}")
        if self.gt is not None:
            validate_cube(self.gt, "gt")
            if self.gt.shape != (h, w, s_hsi):
                raise ValueError(f"gt shape {self.gt.shape} != ({h}, {w}, {s_hsi})")

    @property
    def height(self) -> int:
        return self.msi.shape[0]

    @property
    def width(self) -> int:
        return self.msi.shape[1]


def simulate(
    gt: np.ndarray,
    ratio: int = 4,
    sigma: float | None = None,
    srf: np.ndarray | None = None,
) -> FusionSample:
    """Degrade a ground-truth cube into a fusion sample.

    lr = decimate(gaussian_blur(gt, sigma), ratio); msi = spectral_project(gt, srf);
    up = upsample_bicubic(lr, ratio). sigma defaults to ratio/2, srf to the
    3-band default response.
    """
    gt = validate_cube(gt, "gt").astype(np.float32)
    ratio = int(ratio)
    if sigma is None:
        sigma = ratio / 2.0
    if srf is None:
        srf = default_srf(gt.shape[2])
    lr = decimate(gaussian_blur(gt, sigma), ratio)
    msi = spectral_project(gt, srf)
    up = upsample_bicubic(lr, ratio)
    return FusionSample(gt=gt, lr=lr, msi=msi, up=up, ratio=ratio)


def _grid_origins(extent: int, size: int, stride: int) -> list[int]:
    """Stride-grid origins, final one shifted inward for full coverage."""
    origins = list(range(0, extent - size + 1, stride))
    if origins[-1] != extent - size:
        origins.append(extent - size)
    return origins


def extract_patches(sample: FusionSample, patch: int, stride: int) -> list[FusionSample]:
    """Aligned training patches: HR patch x patch with the co-located LR crop.

    patch and stride must both be divisible by the ratio so every HR origin
    lands on an LR pixel boundary.
    """
    patch, stride = int(patch), int(stride)
    r = sample.ratio
    if patch % r:
        raise ValueError(f"patch {patch} not divisible by ratio {r}")
    if stride < 1 or stride % r:
        raise ValueError(f"stride {stride} must be a positive multiple of ratio {r}")
    h, w = sample.height, sample.width
    if patch > h or patch > w:
        raise ValueError(f"patch {patch} exceeds image {h}x{w}")
    if sample.gt is None:
        raise ValueError("patch extraction needs a ground-truth cube")
    out = []
    for i in _grid_origins(h, patch, stride):
        for j in _grid_origins(w, patch, stride):
            li, lj, lp = i // r, j // r, patch // r
            out.append(
                FusionSample(
                    gt=sample.gt[i : i + patch, j : j + patch].copy(),
                    lr=sample.lr[li : li + lp, lj : lj + lp].copy(),
                    msi=sample.msi[i : i + patch, j : j + patch].copy(),
                    up=sample.up[i : i + patch, j : j + patch].copy(),
                    ratio=r,
                )
            )
    return out


# ---------------------------------------------------------------------------
# synthetic scenes

_N_ENDMEMBERS = 4
_MODES_PER_MAP = 3


def synth_components(seed: int, height: int, width: int, bands: int):
    """Deterministic scene ingredients: abundance maps, endmembers, range.

    Returns (abundances (H, W, 4), endmembers (4, S), lo, hi) where lo/hi
    are the min/max of the raw mixture, used to rescale into [0, 1].
    """
    gen = new_rng(seed)
    centers = gen.uniform(0.1, 0.9, size=_N_ENDMEMBERS) * max(bands - 1, 1)
    widths = gen.uniform(bands / 12.0, bands / 4.0, size=_N_ENDMEMBERS)
    lam = np.arange(bands, dtype=np.float64)
    endmembers = np.exp(
        -((lam[None, :] - centers[:, None]) ** 2) / (2.0 * widths[:, None] ** 2)
    )
    ii = np.arange(height, dtype=np.float64)[:, None] / height
    jj = np.arange(width, dtype=np.float64)[None, :] / width
    raw = np.empty((height, width, _N_ENDMEMBERS))
    for k in range(_N_ENDMEMBERS):
        acc = np.zeros((height, width))
        for _ in range(_MODES_PER_MAP):
            fy, fx = gen.uniform(0.5, 6.0, size=2)
            phase = gen.uniform(0.0, 2.0 * math.pi)
            amp = gen.uniform(0.5, 1.0)
            acc += amp * np.cos(2.0 * math.pi * (fy * ii + fx * jj) + phase)
        raw[:, :, k] = acc
    shifted = np.exp(raw - raw.max(axis=2, keepdims=True))
    abundances = shifted / shifted.sum(axis=2, keepdims=True)
    mix = abundances @ endmembers
    return abundances, endmembers, float(mix.min()), float(mix.max())


def synth_cube(seed: int, height: int, width: int, bands: int) -> np.ndarray:
    """Smooth synthetic hyperspectral scene: 4 Gaussian-bump endmember
    spectra mixed by low-frequency abundance maps, rescaled into [0, 1]."""
    abundances, endmembers, lo, hi = synth_components(seed, height, width, bands)
    mix = abundances @ endmembers
    span = max(hi - lo, 1e-12)
    return ((mix - lo) / span).astype(np.float32)


# ---------------------------------------------------------------------------
# tiled inference


def tile_infer(forward_fn, sample: FusionSample, tile: int, overlap: int) -> np.ndarray:
    """Run forward_fn(up_tile, msi_tile) over overlapping tiles and average.

    Each output pixel is the uniform mean over every tile covering it, so
    the per-pixel blend weights sum to 1. A tile larger than the image in
    either direction falls back to one full-image call.
    """
    tile, overlap = int(tile), int(overlap)
    if tile < 1:
        raise ValueError(f"tile must be >= 1, got {tile}")
    if not (0 <= overlap < tile):
        raise ValueError(f"overlap must be in [0, tile), got {overlap} for tile {tile}")
    if tile % sample.ratio:
        raise ValueError(f"tile {tile} not divisible by ratio {sample.ratio}")
    h, w = sample.height, sample.width
    bands = sample.up.shape[2]
    if tile > h or tile > w:
        out = np.asarray(forward_fn(sample.up, sample.msi), dtype=np.float32)
        if out.shape != (h, w, bands):
            raise ValueError(f"forward produced {out.shape}, expected {(h, w, bands)}")
        return out
    stride = tile - overlap
    acc = np.zeros((h, w, bands), dtype=np.float64)
    weight = np.zeros((h, w), dtype=np.float64)
    for i in _grid_origins(h, tile, stride):
        for j in _grid_origins(w, tile, stride):
            pred = np.asarray(
                forward_fn(
                    sample.up[i : i + tile, j : j + tile],
                    sample.msi[i : i + tile, j : j + tile],
                ),
                dtype=np.float64,
            )
            if pred.shape != (tile, tile, bands):
                raise ValueError(
                    f"forward produced {pred.shape}, expected {(tile, tile, bands)}"
                )
            acc[i : i + tile, j : j + tile] += pred
            weight[i : i + tile, j : j + tile] += 1.0
    return (acc / weight[:, :, None]).astype(np.float32)
