"""Grayscale rasters: crop with zero padding, bicubic resampling, blur, flips, I/O."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .geometry import PatchTransform, Rect


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Single-channel image, row-major ``data[y, x]`` with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"expected a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def __eq__(self, other):
        return isinstance(other, GrayImage) and np.array_equal(self.data, other.data)


def _round(v: float) -> int:
    return int(math.floor(v + 0.5))


def crop_pad(img: GrayImage, r: Rect) -> GrayImage:
    """Cut ``r`` (snapped to whole pixels) out of ``img``; outside pixels are 0."""
    x0, y0 = _round(r.x0), _round(r.y0)
    w, h = max(1, _round(r.width)), max(1, _round(r.height))
    return GrayImage(_crop_array(img.data, x0, y0, w, h))


def _crop_array(data: np.ndarray, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    out = np.zeros((h, w), dtype=np.float64)
    H, W = data.shape
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + w, W), min(y0 + h, H)
    if sx0 < sx1 and sy0 < sy1:
        out[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0] = data[sy0:sy1, sx0:sx1]
    return out


def resize_bicubic(img: GrayImage, out_w: int, out_h: int) -> GrayImage:
    """Catmull-Rom (a = -0.5) resize with edge-clamped borders, clipped to [0, 1]."""
    if out_w < 1 or out_h < 1:
        raise ValueError("output size must be >= 1")
    sy = img.height / out_h
    sx = img.width / out_w
    out = kernels.resample_bicubic(img.data, out_h, out_w, 0.5 * sy - 0.5, sy, 0.5 * sx - 0.5, sx, True)
    return GrayImage(np.clip(out, 0.0, 1.0))


def extract_patch(img: GrayImage, t: PatchTransform) -> np.ndarray:
    """Sample the square patch described by ``t`` from ``img``.

    Equivalent to ``crop_pad`` followed by a bicubic resize, but samples at
    the exact sub-pixel crop position so the raster agrees with ``t`` to
    floating point precision. Returns a float64 ``(out_size, out_size)`` array.
    """
    margin = 3
    x0 = int(math.floor(t.crop.x0)) - margin
    y0 = int(math.floor(t.crop.y0)) - margin
    x1 = int(math.ceil(t.crop.x1)) + margin
    y1 = int(math.ceil(t.crop.y1)) + margin
    buf = _crop_array(img.data, x0, y0, x1 - x0, y1 - y0)
    n = t.out_size
    # patch pixel center (j + 0.5) -> image coordinate -> buffer pixel index
    ys, xs = 1.0 / t.scale_y, 1.0 / t.scale_x
    y_start = 0.5 * ys + t.crop.y0 - 0.5 - y0
    x_start = 0.5 * xs + t.crop.x0 - 0.5 - x0
    out = kernels.resample_bicubic(buf, n, n, y_start, ys, x_start, xs, False)
    return np.clip(out, 0.0, 1.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    r = int(math.ceil(3.0 * sigma))
    k = np.exp(-0.5 * (np.arange(-r, r + 1, dtype=np.float64) / sigma) ** 2)
    return k / k.sum()


def blur_array(data: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return np.array(data, dtype=np.float64, copy=True)
    k = gaussian_kernel(sigma)
    return kernels.convolve1d_reflect(kernels.convolve1d_reflect(data, k, 0), k, 1)


def gaussian_blur(img: GrayImage, sigma: float) -> GrayImage:
    """Separable Gaussian blur, radius ceil(3 sigma), half-sample reflective border."""
    return GrayImage(blur_array(img.data, sigma))


def flip_horizontal(img: GrayImage) -> GrayImage:
    return GrayImage(img.data[:, ::-1].copy())


def normalize_minmax(data: np.ndarray) -> np.ndarray:
    lo, hi = float(data.min()), float(data.max())
    if hi <= lo:
        return np.zeros_like(data, dtype=np.float64)
    return (data.astype(np.float64) - lo) / (hi - lo)


def load_image(path, normalize: bool = True) -> GrayImage:
    """Read an 8/16-bit grayscale PNG or binary PGM into [0, 1].

    With ``normalize`` the intensities are min-max stretched per image;
    otherwise they are divided by the format's full-scale value.
    """
    with Image.open(path) as im:
        mode = im.mode
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel image, got mode {mode}")
    if arr.dtype == np.uint8:
        data = arr / 255.0
    elif arr.dtype in (np.uint16, np.dtype(">u2"), np.dtype("<u2")):
        data = arr.astype(np.float64) / 65535.0
    elif mode.startswith("I"):
        data = arr.astype(np.float64) / 65535.0
    else:
        raise ValueError(f"{path}: unsupported pixel format {mode} / {arr.dtype}")
    if normalize:
        data = normalize_minmax(data)
    return GrayImage(data)


def save_image(path, img: GrayImage, bits: int = 16) -> None:
    data = np.clip(img.data, 0.0, 1.0)
    if bits == 8:
        arr = np.round(data * 255.0).astype(np.uint8)
    elif bits == 16:
        arr = np.round(data * 65535.0).astype(np.uint16)
    else:
        raise ValueError("bits must be 8 or 16")
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        Image.fromarray(arr).save(path, format="PPM")
    else:
        Image.fromarray(arr).save(path, format="PNG")
