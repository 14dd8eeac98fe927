"""Grayscale conversion, resizing, local contrast normalization and PNM input."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyImage, FormatError, IoError

IMAGE_SIZE = 128
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class NormConfig:
    window: int = 32
    sigma_floor: float = 1e-6

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if not self.sigma_floor > 0:
            raise ValueError("sigma_floor must be positive")


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    # align-corners sampling: output corners land exactly on input corners
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def to_gray_resized(raw, size: int = IMAGE_SIZE) -> np.ndarray:
    """Luminance conversion (for 3 channels) followed by a bilinear resize."""
    arr = np.asarray(raw, dtype=np.float64)
    if arr.size == 0:
        raise EmptyImage("image has no pixels")
    if arr.ndim == 3:
        if arr.shape[2] == 1:
            arr = arr[:, :, 0]
        elif arr.shape[2] == 3:
            arr = arr @ LUMA
        else:
            raise ValueError(f"expected 1 or 3 channels, got {arr.shape[2]}")
    elif arr.ndim != 2:
        raise ValueError(f"expected a 2D or 3D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    return _bilinear_resize(arr, size, size)


def _box_sum(x: np.ndarray, r: int, axis: int) -> np.ndarray:
    n = x.shape[axis]
    lo = np.clip(np.arange(n) - r // 2, 0, n)
    hi = np.clip(np.arange(n) - r // 2 + r, 0, n)
    cs = np.cumsum(x, axis=axis)
    pad = [(0, 0)] * x.ndim
    pad[axis] = (1, 0)
    cs = np.pad(cs, pad)
    return np.take(cs, hi, axis=axis) - np.take(cs, lo, axis=axis)


def _window_sums(x: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Sum of ``x`` and in-bounds pixel count over the clipped r x r window of every pixel.

    The box filter is separable, so it runs as two 1D running-sum passes over
    the trailing two axes; stacks of images are handled at once.
    """
    h, w = x.shape[-2:]
    s = _box_sum(_box_sum(x, r, -2), r, -1)
    count = _box_sum(np.ones(h), r, 0)[:, None] * _box_sum(np.ones(w), r, 0)[None, :]
    return s, count


def local_normalize(img: np.ndarray, cfg: NormConfig = NormConfig()) -> np.ndarray:
    """Subtract the local window mean and divide by the local standard deviation.

    The window around pixel ``i`` covers ``[i - r//2, i - r//2 + r)`` on each
    axis, clipped to the image; statistics use only in-bounds pixels.  The
    deviation is floored at ``cfg.sigma_floor``.  Accepts a single image or a
    stack with the image axes last.
    """
    x = np.asarray(img, dtype=np.float64)
    # variance is shift invariant; centering keeps the running sums well conditioned
    x = x - x.mean(axis=(-2, -1), keepdims=True)
    s1, n = _window_sums(x, cfg.window)
    s2, _ = _window_sums(x * x, cfg.window)
    mu = s1 / n
    var = np.maximum(s2 / n - mu * mu, 0.0)
    sigma = np.maximum(np.sqrt(var), cfg.sigma_floor)
    return (x - mu) / sigma


def local_normalize_naive(img: np.ndarray, cfg: NormConfig = NormConfig()) -> np.ndarray:
    """Direct double loop over windows; slow reference for tests."""
    x = np.asarray(img, dtype=np.float64)
    h, w = x.shape
    lo = cfg.window // 2
    out = np.empty_like(x)
    for i in range(h):
        for j in range(w):
            win = x[max(i - lo, 0) : min(i - lo + cfg.window, h), max(j - lo, 0) : min(j - lo + cfg.window, w)]
            mu = win.mean()
            sigma = max(np.sqrt(((win - mu) ** 2).mean()), cfg.sigma_floor)
            out[i, j] = (x[i, j] - mu) / sigma
    return out


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos : pos + 1]
        if ch == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of PNM header")
    return data[start:pos], pos


def read_pnm(path) -> np.ndarray:
    """Read an 8-bit binary PGM (P5) or PPM (P6) file, scaled to [0, 1]."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported PNM magic {magic!r}")
    tokens = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        tokens.append(int(tok))
    width, height, maxval = tokens
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    pos += 1  # single whitespace after maxval
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    body = data[pos : pos + need]
    if len(body) != need:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(body, dtype=np.uint8).astype(np.float64) / 255.0
    if channels == 1:
        return arr.reshape(height, width)
    return arr.reshape(height, width, 3)


def write_pnm(path, img: np.ndarray) -> None:
    """Write a [0, 1] image as PGM (2D) or PPM (H x W x 3)."""
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    magic = b"P5" if arr.ndim == 2 else b"P6"
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(arr.tobytes())


def load_image(path, cfg: NormConfig | None = NormConfig()) -> np.ndarray:
    """PNM file to a 128 x 128 grayscale image, locally normalized unless ``cfg`` is None."""
    gray = to_gray_resized(read_pnm(path))
    return gray if cfg is None else local_normalize(gray, cfg)
