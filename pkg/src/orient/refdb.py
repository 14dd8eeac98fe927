"""Immutable reference database with precomputed FPS anchors and the ORDB file format."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import so3
from .errors import ConfigMismatch, FormatError, InsufficientReferences, IoError, VersionError
from .features import ExtractorConfig, FeaturePyramid, extract_batch
from .preproc import NormConfig, local_normalize

DB_MAGIC = b"ORDB"
DB_VERSION = 1
SUPPORTED_VERSIONS = (DB_VERSION,)


@dataclass(frozen=True)
class ReferenceEntry:
    rotation: np.ndarray
    pyramid: FeaturePyramid
    index: int


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ObjectRefs:
    """All references of one object.

    ``maps[s]`` stacks scale ``s`` of every reference pyramid into one
    contiguous ``(R, H, W, C)`` float32 block.
    """

    category: str
    rotations: np.ndarray
    maps: tuple[np.ndarray, ...]
    anchor_ids: tuple[int, ...]

    def __post_init__(self):
        rot = _readonly(np.asarray(self.rotations, dtype=np.float64))
        maps = tuple(_readonly(np.asarray(m, dtype=np.float32)) for m in self.maps)
        n = rot.shape[0]
        if any(m.shape[0] != n for m in maps):
            raise ConfigMismatch(f"object {self.category!r}: rotation and pyramid counts differ")
        ids = tuple(int(i) for i in self.anchor_ids)
        if not 1 <= len(ids) <= n or len(set(ids)) != len(ids) or not all(0 <= i < n for i in ids):
            raise ValueError(f"object {self.category!r}: invalid anchor ids")
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "anchor_ids", ids)

    @property
    def size(self) -> int:
        return self.rotations.shape[0]

    @property
    def k_ac(self) -> int:
        return len(self.anchor_ids)

    @property
    def scale_dims(self) -> tuple[tuple[int, int], ...]:
        return tuple(m.shape[1:3] for m in self.maps)

    @property
    def channels(self) -> int:
        return self.maps[0].shape[3]

    @cached_property
    def unit_maps(self) -> tuple[np.ndarray, ...]:
        """Channel-normalized copies of ``maps`` used for scoring."""
        out = []
        for m in self.maps:
            norm = np.linalg.norm(m, axis=-1, keepdims=True)
            u = m / np.maximum(norm, np.float32(1e-8))
            out.append(_readonly(u.astype(np.float32)))
        return tuple(out)

    def pyramid(self, index: int) -> FeaturePyramid:
        return FeaturePyramid(tuple(m[index] for m in self.maps))

    def entry(self, index: int) -> ReferenceEntry:
        return ReferenceEntry(self.rotations[index], self.pyramid(index), index)

    def __iter__(self) -> Iterator[ReferenceEntry]:
        return (self.entry(i) for i in range(self.size))

    def __eq__(self, other):
        if not isinstance(other, ObjectRefs):
            return NotImplemented
        return (
            self.category == other.category
            and self.anchor_ids == other.anchor_ids
            and np.array_equal(self.rotations, other.rotations)
            and len(self.maps) == len(other.maps)
            and all(np.array_equal(a, b) for a, b in zip(self.maps, other.maps))
        )


@dataclass(frozen=True, eq=False)
class ReferenceDB:
    objects: tuple[ObjectRefs, ...]
    config: ExtractorConfig = field(init=False)

    def __post_init__(self):
        objs = tuple(self.objects)
        if not objs:
            raise ValueError("database needs at least one object")
        dims, channels = objs[0].scale_dims, objs[0].channels
        for o in objs[1:]:
            if o.scale_dims != dims or o.channels != channels:
                raise ConfigMismatch(
                    f"object {o.category!r} has {o.scale_dims}/c{o.channels}, expected {dims}/c{channels}"
                )
        labels = [o.category for o in objs]
        if len(set(labels)) != len(labels):
            raise ConfigMismatch("category labels must be unique")
        object.__setattr__(self, "objects", objs)
        object.__setattr__(self, "config", ExtractorConfig(dims, channels))

    @property
    def fingerprint(self) -> str:
        return self.config.fingerprint

    @property
    def categories(self) -> list[str]:
        return [o.category for o in self.objects]

    def __len__(self) -> int:
        return len(self.objects)

    def __eq__(self, other):
        if not isinstance(other, ReferenceDB):
            return NotImplemented
        return len(self.objects) == len(other.objects) and all(a == b for a, b in zip(self.objects, other.objects))


@dataclass
class ObjectSource:
    """Inputs for one object: rotations plus either pyramids, stacked maps or raw images."""

    category: str
    rotations: np.ndarray
    pyramids: Sequence[FeaturePyramid] | None = None
    maps: Sequence[np.ndarray] | None = None
    images: np.ndarray | None = None


def _source_maps(src: ObjectSource, cfg: ExtractorConfig | None, norm: NormConfig | None):
    if src.maps is not None:
        return tuple(np.asarray(m, dtype=np.float32) for m in src.maps)
    if src.pyramids is not None:
        pyrs = list(src.pyramids)
        if not pyrs:
            return ()
        dims = pyrs[0].scale_dims
        for p in pyrs:
            if p.scale_dims != dims or p.channels != pyrs[0].channels:
                raise ConfigMismatch(f"object {src.category!r}: pyramids have inconsistent dims")
        return tuple(np.stack([p.scales[s] for p in pyrs]) for s in range(len(dims)))
    if src.images is not None:
        if cfg is None:
            raise ConfigMismatch("extracting from images needs an ExtractorConfig")
        imgs = np.asarray(src.images, dtype=np.float64)
        if norm is not None:
            imgs = local_normalize(imgs, norm)
        return tuple(extract_batch(imgs, cfg))
    raise ValueError(f"object {src.category!r} has no pyramids or images")


def build(
    sources: Sequence[ObjectSource],
    k_ac: int,
    cfg: ExtractorConfig | None = None,
    norm: NormConfig | None = NormConfig(),
) -> ReferenceDB:
    """Assemble a database and pick ``k_ac`` FPS anchors per object (seeded at reference 0)."""
    objects = []
    for src in sources:
        rot = np.asarray(src.rotations, dtype=np.float64)
        maps = _source_maps(src, cfg, norm)
        n = rot.shape[0]
        if n < k_ac or k_ac < 1:
            raise InsufficientReferences(
                f"object {src.category!r} has {n} references, needs at least k_ac={k_ac} (>= 1)"
            )
        if maps and maps[0].shape[0] != n:
            raise ConfigMismatch(f"object {src.category!r}: {n} rotations but {maps[0].shape[0]} pyramids")
        dims = tuple(m.shape[1:3] for m in maps)
        channels = maps[0].shape[3]
        if cfg is not None and (dims != cfg.scale_dims or channels != cfg.channels):
            raise ConfigMismatch(
                f"object {src.category!r} has {dims}/c{channels}, configured {cfg.scale_dims}/c{cfg.channels}"
            )
        if objects and (dims != objects[0].scale_dims or channels != objects[0].channels):
            raise ConfigMismatch(
                f"object {src.category!r} has {dims}/c{channels}, "
                f"but {objects[0].category!r} has {objects[0].scale_dims}/c{objects[0].channels}"
            )
        anchors = so3.fps_select(rot, k_ac, start=0)
        objects.append(ObjectRefs(src.category, rot, maps, tuple(anchors)))
    return ReferenceDB(tuple(objects))


# ---------------------------------------------------------------- persistence


def encode_db(db: ReferenceDB) -> bytes:
    cfg = db.config
    s = len(cfg.scale_dims)
    parts = [DB_MAGIC, struct.pack("<IIII", DB_VERSION, len(db.objects), s, cfg.channels)]
    parts += [struct.pack("<II", h, w) for h, w in cfg.scale_dims]
    for obj in db.objects:
        label = obj.category.encode("utf-8")
        parts.append(struct.pack("<I", len(label)) + label)
        parts.append(struct.pack("<II", obj.size, obj.k_ac))
        parts.append(np.asarray(obj.anchor_ids, dtype="<u4").tobytes())
        # per reference: 9 f64 rotation entries followed by each scale's f32 block
        cols = [obj.rotations.astype("<f8").reshape(obj.size, 9).view(np.uint8)]
        cols += [m.astype("<f4").reshape(obj.size, -1).view(np.uint8) for m in obj.maps]
        parts.append(np.concatenate(cols, axis=1).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated database file (need {n} bytes at offset {self.pos})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def decode_db(data: bytes) -> ReferenceDB:
    rd = _Reader(data)
    if rd.take(4) != DB_MAGIC:
        raise FormatError("not a reference database file (bad magic)")
    version = rd.u32()
    if version not in SUPPORTED_VERSIONS:
        raise VersionError(f"database version {version} unsupported (supported versions: {SUPPORTED_VERSIONS})")
    n, s, c = rd.u32(3)
    dims = [tuple(rd.u32(2)) for _ in range(s)]
    cells = [h * w * c for h, w in dims]
    row_bytes = 72 + 4 * sum(cells)
    objects = []
    for _ in range(n):
        label = rd.take(rd.u32()).decode("utf-8")
        r, k = rd.u32(2)
        anchors = np.frombuffer(rd.take(4 * k), dtype="<u4").astype(int)
        rows = np.frombuffer(rd.take(r * row_bytes), dtype=np.uint8).reshape(r, row_bytes)
        rot = rows[:, :72].copy().view("<f8").reshape(r, 3, 3)
        maps, off = [], 72
        for (h, w), cnt in zip(dims, cells):
            block = rows[:, off : off + 4 * cnt].copy().view("<f4").reshape(r, h, w, c)
            maps.append(block.astype(np.float32))
            off += 4 * cnt
        objects.append(ObjectRefs(label, rot, tuple(maps), tuple(anchors)))
    if rd.pos != len(data):
        raise FormatError(f"{len(data) - rd.pos} trailing bytes after database payload")
    return ReferenceDB(tuple(objects))


def save(db: ReferenceDB, path) -> None:
    try:
        Path(path).write_bytes(encode_db(db))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load(path) -> ReferenceDB:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return decode_db(data)


# ---------------------------------------------------------------- manifests

MANIFEST_COLUMNS = ["index"] + [f"r{i}{j}" for i in range(3) for j in range(3)]


def read_rotation_manifest(path) -> tuple[list[int], np.ndarray]:
    """Parse a ``index,r00..r22`` CSV; rows come back sorted by index."""
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as exc:
        raise IoError(f"cannot read rotation manifest {path}: {exc}") from exc
    if not rows or any(col not in rows[0] for col in MANIFEST_COLUMNS):
        raise FormatError(f"{path}: rotation manifest needs columns {','.join(MANIFEST_COLUMNS)}")
    parsed = []
    for row in rows:
        try:
            idx = int(row["index"])
            m = np.array([float(row[col]) for col in MANIFEST_COLUMNS[1:]]).reshape(3, 3)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{path}: bad manifest row {row}: {exc}") from exc
        if not so3.is_rotation(m, 1e-6):
            raise FormatError(f"{path}: row {idx} is not a rotation matrix")
        parsed.append((idx, m))
    parsed.sort(key=lambda t: t[0])
    return [i for i, _ in parsed], np.stack([m for _, m in parsed])


def write_rotation_manifest(path, rotations: np.ndarray, indices: Sequence[int] | None = None) -> None:
    rotations = np.asarray(rotations, dtype=np.float64)
    indices = range(len(rotations)) if indices is None else indices
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(MANIFEST_COLUMNS)
        for i, m in zip(indices, rotations):
            w.writerow([i] + [repr(float(v)) for v in m.ravel()])
