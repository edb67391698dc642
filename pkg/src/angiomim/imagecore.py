"""Raster primitives: image I/O, separable Gaussian smoothing, discrete Hessians.

Gray images are 2-D ``float64`` arrays indexed ``[row, col]`` with values in
[0, 1] after loading.  Binary masks are 2-D ``uint8`` arrays holding {0, 1}.
"""

from __future__ import annotations

import math
import os
from typing import NamedTuple

import numpy as np

from .validation import ParameterError, check_image

__all__ = [
    "ImageFormatError",
    "HessianField",
    "load_image",
    "read_pgm",
    "write_pgm",
    "save_mask",
    "gaussian_kernel1d",
    "gaussian_smooth",
    "hessian",
    "eig2x2_symmetric",
    "percentile",
]

# Same convention as numpy's "reflect": the edge sample is not repeated.
PAD_MODE = "reflect"


class ImageFormatError(ValueError):
    """Raised for unsupported or malformed image files."""


class HessianField(NamedTuple):
    dxx: np.ndarray
    dxy: np.ndarray
    dyy: np.ndarray


# --------------------------------------------------------------------------- I/O


def _pgm_tokens(data: bytes, count: int, start: int = 2):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    pos = start
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        begin = pos
        while pos < n and not data[pos : pos + 1].isspace():
            pos += 1
        if begin == pos:
            raise ImageFormatError("truncated PGM header")
        tokens.append(int(data[begin:pos]))
    return tokens, pos


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return the raw integer raster of a P2/P5 file and its maxval."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise ImageFormatError(f"{path}: not a PGM file (magic {magic!r})")
    (width, height, maxval), pos = _pgm_tokens(data, 3)
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: unsupported maxval {maxval}")
    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        nbytes = width * height * dtype.itemsize
        raw = np.frombuffer(data[pos : pos + nbytes], dtype=dtype)
        if raw.size != width * height:
            raise ImageFormatError(f"{path}: truncated pixel data")
    else:
        raw = np.array(data[pos:].split(), dtype=np.int64)
        if raw.size < width * height:
            raise ImageFormatError(f"{path}: truncated pixel data")
        raw = raw[: width * height]
    return raw.reshape(height, width).astype(np.int64), maxval


def write_pgm(path, raster: np.ndarray, maxval: int = 255, binary: bool = True) -> None:
    """Write an integer raster as P5 (default) or P2."""
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise ParameterError("PGM raster must be 2-D")
    if raster.min(initial=0) < 0 or raster.max(initial=0) > maxval:
        raise ParameterError(f"raster values outside [0, {maxval}]")
    height, width = raster.shape
    header = f"P{5 if binary else 2}\n{width} {height}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        if binary:
            dtype = ">u2" if maxval > 255 else "u1"
            fh.write(raster.astype(dtype).tobytes())
        else:
            for row in raster:
                fh.write((" ".join(str(int(v)) for v in row) + "\n").encode("ascii"))


def save_image(path, img: np.ndarray) -> None:
    """Quantize a [0, 1] image to 8 bits and write it as P5."""
    img = check_image(img, min_size=1)
    write_pgm(path, np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.int64))


def save_mask(path, mask: np.ndarray) -> None:
    """Masks are stored with values {0, 255}."""
    write_pgm(path, (np.asarray(mask) > 0).astype(np.int64) * 255)


def load_mask(path) -> np.ndarray:
    return (load_image(path) >= 0.5).astype(np.uint8)


def load_image(path) -> np.ndarray:
    """Load a PGM or PNG file as a gray image scaled to [0, 1].

    Three-channel inputs are averaged to a single channel after scaling.
    """
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            magic = fh.read(8)
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc

    if magic[:2] in (b"P2", b"P5"):
        raw, maxval = read_pgm(path)
        return raw.astype(np.float64) / maxval

    if magic.startswith(b"\x89PNG"):
        from PIL import Image

        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
        if mode in ("L", "RGB", "RGBA", "LA"):
            scale = 255.0
        elif mode in ("I;16", "I;16B", "I;16L", "I"):
            scale = 65535.0
        else:
            raise ImageFormatError(f"{path}: unsupported PNG mode {mode}")
        arr = arr.astype(np.float64) / scale
        if arr.ndim == 3:
            arr = arr[..., :3].mean(axis=2) if arr.shape[2] >= 3 else arr[..., 0]
        return arr

    raise ImageFormatError(f"{path}: unsupported image format")


# ----------------------------------------------------------------- smoothing


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    """Normalized Gaussian taps on [-ceil(3 sigma), ceil(3 sigma)]."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _correlate_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = kernel.size // 2
    pad = [(0, 0), (0, 0)]
    pad[axis] = (radius, radius)
    padded = np.pad(img, pad, mode=PAD_MODE)
    n = img.shape[axis]
    out = np.zeros_like(img)
    for j, w in enumerate(kernel):
        out += w * (padded[j : j + n, :] if axis == 0 else padded[:, j : j + n])
    return out


def gaussian_smooth(img: np.ndarray, sigma: float, order: str = "rows-first") -> np.ndarray:
    """Separable Gaussian blur with reflect borders.

    ``order`` selects which axis is filtered first ("rows-first" filters along
    each row, i.e. the x axis, then along columns); results agree to rounding.
    """
    kernel = gaussian_kernel1d(sigma)
    img = check_image(img, min_size=1)
    if order == "rows-first":
        return _correlate_axis(_correlate_axis(img, kernel, 1), kernel, 0)
    if order == "cols-first":
        return _correlate_axis(_correlate_axis(img, kernel, 0), kernel, 1)
    raise ParameterError(f"unknown order {order!r}")


# ------------------------------------------------------------------- Hessian


def hessian(img: np.ndarray) -> HessianField:
    """Second-order central differences with reflect borders.

    x runs along columns and y along rows, so ``dxx`` differentiates across
    neighbouring columns.
    """
    img = check_image(img, min_size=3)
    p = np.pad(img, 1, mode=PAD_MODE)
    c = p[1:-1, 1:-1]
    dxx = p[1:-1, 2:] - 2.0 * c + p[1:-1, :-2]
    dyy = p[2:, 1:-1] - 2.0 * c + p[:-2, 1:-1]
    dxy = 0.25 * (p[2:, 2:] - p[2:, :-2] - p[:-2, 2:] + p[:-2, :-2])
    return HessianField(dxx, dxy, dyy)


def eig2x2_symmetric(dxx, dxy, dyy):
    """Eigenvalues of [[dxx, dxy], [dxy, dyy]] ordered so |l1| <= |l2|.

    Works elementwise on scalars or arrays.
    """
    dxx = np.asarray(dxx, dtype=np.float64)
    dxy = np.asarray(dxy, dtype=np.float64)
    dyy = np.asarray(dyy, dtype=np.float64)
    # work on unit-scale entries so the determinant cannot under/overflow
    scale = np.maximum(np.maximum(np.abs(dxx), np.abs(dyy)), np.abs(dxy))
    scale = np.where(scale > 0, scale, 1.0)
    a, b, c = dxx / scale, dxy / scale, dyy / scale
    half_trace = 0.5 * (a + c)
    disc = np.hypot(0.5 * (a - c), b)
    # larger-magnitude root directly, the other from the determinant, which
    # avoids cancellation for tiny eigenvalues
    big = np.where(half_trace >= 0, half_trace + disc, half_trace - disc)
    det = a * c - b * b
    with np.errstate(divide="ignore", invalid="ignore"):
        small = np.where(big != 0, det / np.where(big != 0, big, 1.0), 0.0)
    small, big = small * scale, big * scale
    # equal-magnitude pairs can come out one ulp out of order
    swap = np.abs(small) > np.abs(big)
    small, big = np.where(swap, big, small), np.where(swap, small, big)
    if small.ndim == 0:
        return float(small), float(big)
    return small, big


def percentile(values, alpha: float) -> float:
    """Nearest-rank percentile: element ``ceil(alpha/100 * n) - 1`` of the sorted values."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ParameterError("percentile of an empty sequence")
    if not 0.0 <= alpha <= 100.0:
        raise ParameterError(f"alpha must lie in [0, 100], got {alpha}")
    n = v.size
    rank = int(math.ceil(alpha * n / 100.0)) - 1
    rank = min(max(rank, 0), n - 1)
    return float(np.partition(v, rank)[rank])
