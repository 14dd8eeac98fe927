"""Multi-scale feature pyramids: a gradient-orientation-histogram extractor and the FPYR file format.

The extractor is a deterministic stand-in for a learned backbone.  Anything
that maps an image to a :class:`FeaturePyramid` can be plugged in instead;
pyramids computed elsewhere are ingested with :func:`load_pyramid`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .errors import DimensionError, FormatError, IoError, VersionError
from .preproc import IMAGE_SIZE

PYRAMID_MAGIC = b"FPYR"
PYRAMID_VERSION = 1
NORM_FLOOR = 1e-8

DEFAULT_SCALES = ((13, 13), (26, 26), (52, 52))


def _check_dims(scale_dims: Sequence[tuple[int, int]], channels: int) -> tuple[tuple[int, int], ...]:
    dims = tuple((int(h), int(w)) for h, w in scale_dims)
    if len(dims) < 1:
        raise DimensionError("a pyramid needs at least one scale")
    if channels < 1:
        raise DimensionError("channel count must be positive")
    for prev, cur in zip(dims, dims[1:]):
        if not (cur[0] > prev[0] and cur[1] > prev[1]):
            raise DimensionError(f"scale dims must strictly increase, got {prev} then {cur}")
    return dims


@dataclass(frozen=True)
class ExtractorConfig:
    scale_dims: tuple[tuple[int, int], ...] = DEFAULT_SCALES
    channels: int = 8

    def __post_init__(self):
        dims = _check_dims(self.scale_dims, self.channels)
        for h, w in dims:
            if not (2 <= h <= IMAGE_SIZE and 2 <= w <= IMAGE_SIZE):
                raise ValueError(f"scale dimension {(h, w)} outside [2, {IMAGE_SIZE}]")
        object.__setattr__(self, "scale_dims", dims)

    @property
    def fingerprint(self) -> str:
        dims = ",".join(f"{h}x{w}" for h, w in self.scale_dims)
        return f"{dims}/c{self.channels}"


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    """Per-scale maps of shape ``(H_i, W_i, C)``, coarsest first."""

    scales: tuple[np.ndarray, ...]
    scale_dims: tuple[tuple[int, int], ...] = field(init=False)
    channels: int = field(init=False)

    def __post_init__(self):
        maps = tuple(np.asarray(m, dtype=np.float32) for m in self.scales)
        if not maps or any(m.ndim != 3 for m in maps):
            raise DimensionError("each scale must be an H x W x C array")
        channels = maps[0].shape[2]
        if any(m.shape[2] != channels for m in maps):
            raise DimensionError("channel count differs between scales")
        dims = _check_dims([m.shape[:2] for m in maps], channels)
        for m in maps:
            if not np.all(np.isfinite(m)):
                raise ValueError("pyramid contains non-finite values")
        object.__setattr__(self, "scales", maps)
        object.__setattr__(self, "scale_dims", dims)
        object.__setattr__(self, "channels", int(channels))

    @property
    def config(self) -> ExtractorConfig:
        return ExtractorConfig(self.scale_dims, self.channels)

    def __eq__(self, other):
        if not isinstance(other, FeaturePyramid):
            return NotImplemented
        return self.scale_dims == other.scale_dims and all(
            np.array_equal(a, b) for a, b in zip(self.scales, other.scales)
        )


class Extractor(Protocol):
    def __call__(self, img: np.ndarray) -> FeaturePyramid: ...


def _cell_index(n_pixels: int, n_cells: int) -> np.ndarray:
    # cell u spans pixels floor(n*u/H) .. floor(n*(u+1)/H) - 1
    bounds = (np.arange(n_cells + 1) * n_pixels) // n_cells
    return np.repeat(np.arange(n_cells), np.diff(bounds))


def orientation_bins(img: np.ndarray, channels: int) -> tuple[np.ndarray, np.ndarray]:
    """Unsigned gradient orientation bin and magnitude per pixel (trailing two axes)."""
    x = np.asarray(img, dtype=np.float64)
    # np.gradient: central differences inside, one-sided at the borders
    gy, gx = np.gradient(x, axis=(-2, -1))
    mag = np.hypot(gx, gy)
    ang = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.minimum((ang * (channels / np.pi)).astype(np.int64), channels - 1)
    return bins, mag


def extract_batch(imgs: np.ndarray, cfg: ExtractorConfig = ExtractorConfig()) -> list[np.ndarray]:
    """Extract feature maps for a stack of images ``(n, 128, 128)``.

    Returns one float32 array of shape ``(n, H_i, W_i, C)`` per scale.
    """
    imgs = np.asarray(imgs, dtype=np.float64)
    if imgs.ndim != 3 or imgs.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
        raise DimensionError(f"expected (n, {IMAGE_SIZE}, {IMAGE_SIZE}) images, got {imgs.shape}")
    n = imgs.shape[0]
    c = cfg.channels
    bins, mag = orientation_bins(imgs, c)
    out = []
    for h, w in cfg.scale_dims:
        rows = _cell_index(IMAGE_SIZE, h)
        cols = _cell_index(IMAGE_SIZE, w)
        cell = (rows[:, None] * w + cols[None, :]) * c
        flat = (np.arange(n)[:, None, None] * (h * w * c) + cell[None] + bins).ravel()
        hist = np.bincount(flat, weights=mag.ravel(), minlength=n * h * w * c).reshape(n, h, w, c)
        norm = np.linalg.norm(hist, axis=-1, keepdims=True)
        out.append((hist / np.maximum(norm, NORM_FLOOR)).astype(np.float32))
    return out


def extract(img: np.ndarray, cfg: ExtractorConfig = ExtractorConfig()) -> FeaturePyramid:
    """Gradient-orientation histogram pyramid of one normalized 128 x 128 image."""
    maps = extract_batch(np.asarray(img)[None], cfg)
    return FeaturePyramid(tuple(m[0] for m in maps))


def encode_pyramid_body(pyr: FeaturePyramid) -> bytes:
    return b"".join(np.ascontiguousarray(m, dtype="<f4").tobytes() for m in pyr.scales)


def encode_pyramid(pyr: FeaturePyramid) -> bytes:
    head = PYRAMID_MAGIC + struct.pack("<III", PYRAMID_VERSION, len(pyr.scales), pyr.channels)
    dims = b"".join(struct.pack("<II", h, w) for h, w in pyr.scale_dims)
    return head + dims + encode_pyramid_body(pyr)


def decode_pyramid(data: bytes) -> FeaturePyramid:
    if len(data) < 16 or data[:4] != PYRAMID_MAGIC:
        raise FormatError("not a pyramid file (bad magic)")
    version, s, c = struct.unpack_from("<III", data, 4)
    if version != PYRAMID_VERSION:
        raise VersionError(f"pyramid version {version} unsupported (supported: {PYRAMID_VERSION})")
    pos = 16
    if len(data) < pos + 8 * s:
        raise FormatError("truncated pyramid header")
    dims = [struct.unpack_from("<II", data, pos + 8 * i) for i in range(s)]
    pos += 8 * s
    _check_dims(dims, c)
    maps = []
    for h, w in dims:
        nbytes = 4 * h * w * c
        if len(data) < pos + nbytes:
            raise FormatError("truncated pyramid payload")
        maps.append(np.frombuffer(data, dtype="<f4", count=h * w * c, offset=pos).reshape(h, w, c))
        pos += nbytes
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes after pyramid payload")
    return FeaturePyramid(tuple(maps))


def save_pyramid(pyr: FeaturePyramid, path) -> None:
    try:
        Path(path).write_bytes(encode_pyramid(pyr))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_pyramid(path) -> FeaturePyramid:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return decode_pyramid(data)
